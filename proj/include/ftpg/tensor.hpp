#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <sstream>
#include <string>

#include "ftpg/errors.hpp"

namespace ftpg {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using RowVector = RowVectorX<double>;

namespace detail {

template <typename A>
std::string shape_of(const Eigen::EigenBase<A>& a) {
  std::ostringstream os;
  os << a.rows() << "x" << a.cols();
  return os.str();
}

template <typename A, typename B>
[[noreturn]] void throw_shape(const char* op, const Eigen::EigenBase<A>& a,
                              const Eigen::EigenBase<B>& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_of(a) + " and " +
                   shape_of(b));
}

}  // namespace detail

/// Shape-checked matrix product.
template <typename DerivedA, typename DerivedB>
MatrixX<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                          const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.rows()) detail::throw_shape("matmul", a, b);
  return a * b;
}

/// Shape-checked a * b^T.
template <typename DerivedA, typename DerivedB>
MatrixX<typename DerivedA::Scalar> matmul_nt(const Eigen::MatrixBase<DerivedA>& a,
                                             const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.cols()) detail::throw_shape("matmul_nt", a, b);
  return a * b.transpose();
}

/// Row-wise softmax of a / scale with max subtraction.
template <typename Derived>
MatrixX<typename Derived::Scalar> row_softmax(const Eigen::MatrixBase<Derived>& a,
                                              typename Derived::Scalar scale) {
  using Scalar = typename Derived::Scalar;
  if (!(scale > Scalar(0))) throw ParameterError("row_softmax: scale must be > 0");
  MatrixX<Scalar> out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const Scalar peak = a.row(i).maxCoeff();
    out.row(i) = ((a.row(i).array() - peak) / scale).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

/// Softmax backward: given y = row_softmax(x, scale) and dL/dy, returns dL/dx.
template <typename DerivedY, typename DerivedG>
MatrixX<typename DerivedY::Scalar> row_softmax_backward(const Eigen::MatrixBase<DerivedY>& y,
                                                        const Eigen::MatrixBase<DerivedG>& g,
                                                        typename DerivedY::Scalar scale) {
  using Scalar = typename DerivedY::Scalar;
  MatrixX<Scalar> dx(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const Scalar dot = y.row(i).dot(g.row(i));
    dx.row(i) = (y.row(i).array() * (g.row(i).array() - dot) / scale).matrix();
  }
  return dx;
}

/// Cached intermediates of a layer-norm forward pass.
template <typename Scalar>
struct LayerNormResult {
  MatrixX<Scalar> out;
  MatrixX<Scalar> normalized;  // (x - mean) / sqrt(var + eps)
  VectorX<Scalar> inv_std;
};

/// Per-row layer normalization with population variance.
template <typename DerivedX, typename DerivedG, typename DerivedB>
LayerNormResult<typename DerivedX::Scalar> layer_norm(const Eigen::MatrixBase<DerivedX>& x,
                                                      const Eigen::MatrixBase<DerivedG>& gamma,
                                                      const Eigen::MatrixBase<DerivedB>& beta,
                                                      typename DerivedX::Scalar eps) {
  using Scalar = typename DerivedX::Scalar;
  if (gamma.size() != x.cols()) detail::throw_shape("layer_norm(gamma)", x, gamma);
  if (beta.size() != x.cols()) detail::throw_shape("layer_norm(beta)", x, beta);
  if (!(eps > Scalar(0))) throw ParameterError("layer_norm: eps must be > 0");
  LayerNormResult<Scalar> r;
  r.out.resize(x.rows(), x.cols());
  r.normalized.resize(x.rows(), x.cols());
  r.inv_std.resize(x.rows());
  const Scalar cols = static_cast<Scalar>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar mean = x.row(i).sum() / cols;
    const auto centered = (x.row(i).array() - mean).eval();
    const Scalar var = centered.square().sum() / cols;
    const Scalar inv_std = Scalar(1) / std::sqrt(var + eps);
    r.inv_std(i) = inv_std;
    r.normalized.row(i) = (centered * inv_std).matrix();
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      r.out(i, j) = r.normalized(i, j) * gamma(j) + beta(j);
    }
  }
  return r;
}

template <typename Scalar>
struct LayerNormGrads {
  MatrixX<Scalar> dx;
  RowVectorX<Scalar> dgamma;
  RowVectorX<Scalar> dbeta;
};

template <typename Scalar, typename DerivedG, typename DerivedU>
LayerNormGrads<Scalar> layer_norm_backward(const LayerNormResult<Scalar>& fwd,
                                           const Eigen::MatrixBase<DerivedG>& gamma,
                                           const Eigen::MatrixBase<DerivedU>& upstream) {
  const Eigen::Index rows = fwd.normalized.rows();
  const Eigen::Index cols = fwd.normalized.cols();
  LayerNormGrads<Scalar> g;
  g.dx.resize(rows, cols);
  g.dgamma = (upstream.array() * fwd.normalized.array()).colwise().sum().matrix();
  g.dbeta = upstream.colwise().sum();
  for (Eigen::Index i = 0; i < rows; ++i) {
    RowVectorX<Scalar> dn(cols);
    for (Eigen::Index j = 0; j < cols; ++j) dn(j) = upstream(i, j) * gamma(j);
    const Scalar mean_dn = dn.mean();
    const Scalar mean_dn_n = dn.dot(fwd.normalized.row(i)) / static_cast<Scalar>(cols);
    g.dx.row(i) =
        ((dn.array() - mean_dn - fwd.normalized.row(i).array() * mean_dn_n) * fwd.inv_std(i))
            .matrix();
  }
  return g;
}

/// Pairwise cosine similarity between the rows of a and the rows of b.
template <typename DerivedA, typename DerivedB>
MatrixX<typename DerivedA::Scalar> cosine_rows(const Eigen::MatrixBase<DerivedA>& a,
                                               const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.cols() != b.cols()) detail::throw_shape("cosine_rows", a, b);
  const VectorX<Scalar> na = a.rowwise().norm();
  const VectorX<Scalar> nb = b.rowwise().norm();
  for (Eigen::Index i = 0; i < na.size(); ++i)
    if (!(na(i) > Scalar(0))) throw DegenerateInputError("cosine_rows: zero-norm row in a", i);
  for (Eigen::Index j = 0; j < nb.size(); ++j)
    if (!(nb(j) > Scalar(0))) throw DegenerateInputError("cosine_rows: zero-norm row in b", j);
  const MatrixX<Scalar> ua = na.cwiseInverse().asDiagonal() * a;
  const MatrixX<Scalar> ub = nb.cwiseInverse().asDiagonal() * b;
  return ua * ub.transpose();
}

template <typename Scalar>
struct CosineGrads {
  MatrixX<Scalar> da;
  MatrixX<Scalar> db;
};

/// Gradients of cosine_rows given the forward output and dL/dout.
template <typename DerivedA, typename DerivedB, typename DerivedO, typename DerivedG>
CosineGrads<typename DerivedA::Scalar> cosine_rows_backward(
    const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
    const Eigen::MatrixBase<DerivedO>& out, const Eigen::MatrixBase<DerivedG>& g) {
  using Scalar = typename DerivedA::Scalar;
  const VectorX<Scalar> na = a.rowwise().norm();
  const VectorX<Scalar> nb = b.rowwise().norm();
  const MatrixX<Scalar> ua = na.cwiseInverse().asDiagonal() * a;
  const MatrixX<Scalar> ub = nb.cwiseInverse().asDiagonal() * b;
  const MatrixX<Scalar> go = (g.array() * out.array()).matrix();
  CosineGrads<Scalar> r;
  r.da = na.cwiseInverse().asDiagonal() *
         (g * ub - go.rowwise().sum().asDiagonal() * ua);
  r.db = nb.cwiseInverse().asDiagonal() *
         (g.transpose() * ua - go.colwise().sum().transpose().asDiagonal() * ub);
  return r;
}

/// Classic heavy-ball SGD with coupled L2 decay. Updates velocity in place and
/// returns the new parameters.
struct SgdHyper {
  double lr = 0.003;
  double momentum = 0.9;
  double weight_decay = 1e-5;
};

Vector sgd_momentum_step(const Vector& params, const Vector& grads, Vector& velocity,
                         const SgdHyper& hyper);

/// Central finite differences of a scalar function; test oracle for the tape.
Vector finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& theta,
                        double h = 1e-5);

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
double relative_error(const Vector& a, const Vector& b);

}  // namespace ftpg
