#include "ftpg/tape.hpp"

#include <cmath>
#include <string>

namespace ftpg {

Var GradTape::push(Matrix value, bool requires_grad, Backprop backprop) {
  nodes_.push_back(Node{std::move(value), Matrix(), requires_grad,
                        requires_grad ? std::move(backprop) : Backprop()});
  return Var{nodes_.size() - 1};
}

void GradTape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[v.index];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

Var GradTape::constant(Matrix value) { return push(std::move(value), false, {}); }

Var GradTape::parameter(Matrix value) { return push(std::move(value), true, {}); }

Var GradTape::matmul(Var a, Var b) {
  Matrix out = ftpg::matmul(value(a), value(b));
  return push(std::move(out), needs(a) || needs(b), [a, b](GradTape& t, const Matrix& g) {
    if (t.needs(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.needs(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

Var GradTape::matmul_nt(Var a, Var b) {
  Matrix out = ftpg::matmul_nt(value(a), value(b));
  return push(std::move(out), needs(a) || needs(b), [a, b](GradTape& t, const Matrix& g) {
    if (t.needs(a)) t.accumulate(a, g * t.value(b));
    if (t.needs(b)) t.accumulate(b, g.transpose() * t.value(a));
  });
}

Var GradTape::add(Var a, Var b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
    detail::throw_shape("add", value(a), value(b));
  Matrix out = value(a) + value(b);
  return push(std::move(out), needs(a) || needs(b), [a, b](GradTape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var GradTape::sub(Var a, Var b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
    detail::throw_shape("sub", value(a), value(b));
  Matrix out = value(a) - value(b);
  return push(std::move(out), needs(a) || needs(b), [a, b](GradTape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.needs(b)) t.accumulate(b, -g);
  });
}

Var GradTape::add_row(Var a, Var row) {
  if (value(row).rows() != 1 || value(row).cols() != value(a).cols())
    detail::throw_shape("add_row", value(a), value(row));
  Matrix out = value(a).rowwise() + value(row).row(0);
  return push(std::move(out), needs(a) || needs(row), [a, row](GradTape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.needs(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var GradTape::scale(Var a, double factor) {
  Matrix out = value(a) * factor;
  return push(std::move(out), needs(a),
              [a, factor](GradTape& t, const Matrix& g) { t.accumulate(a, g * factor); });
}

Var GradTape::relu(Var a) {
  Matrix out = value(a).cwiseMax(0.0);
  return push(std::move(out), needs(a), [a](GradTape& t, const Matrix& g) {
    t.accumulate(a, (t.value(a).array() > 0.0).select(g, 0.0));
  });
}

Var GradTape::row_softmax(Var a, double scale) {
  Matrix out = ftpg::row_softmax(value(a), scale);
  const std::size_t self = nodes_.size();
  return push(std::move(out), needs(a), [a, scale, self](GradTape& t, const Matrix& g) {
    t.accumulate(a, row_softmax_backward(t.nodes_[self].value, g, scale));
  });
}

Var GradTape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  auto fwd = ftpg::layer_norm(value(x), value(gamma).reshaped<Eigen::RowMajor>(),
                              value(beta).reshaped<Eigen::RowMajor>(), eps);
  Matrix out = fwd.out;
  const bool req = needs(x) || needs(gamma) || needs(beta);
  return push(std::move(out), req,
              [x, gamma, beta, cache = std::move(fwd)](GradTape& t, const Matrix& g) {
                const Matrix& gm = t.value(gamma);
                auto grads = layer_norm_backward(cache, gm.reshaped<Eigen::RowMajor>(), g);
                t.accumulate(x, grads.dx);
                if (t.needs(gamma))
                  t.accumulate(gamma, grads.dgamma.reshaped<Eigen::RowMajor>(gm.rows(), gm.cols()));
                if (t.needs(beta)) {
                  const Matrix& bm = t.value(beta);
                  t.accumulate(beta, grads.dbeta.reshaped<Eigen::RowMajor>(bm.rows(), bm.cols()));
                }
              });
}

Var GradTape::cosine_rows(Var a, Var b) {
  Matrix out = ftpg::cosine_rows(value(a), value(b));
  const std::size_t self = nodes_.size();
  return push(std::move(out), needs(a) || needs(b), [a, b, self](GradTape& t, const Matrix& g) {
    auto grads = cosine_rows_backward(t.value(a), t.value(b), t.nodes_[self].value, g);
    t.accumulate(a, grads.da);
    t.accumulate(b, grads.db);
  });
}

Var GradTape::col_block(Var a, Eigen::Index start, Eigen::Index count) {
  const Matrix& src = value(a);
  if (start < 0 || count < 0 || start + count > src.cols())
    throw ShapeError("col_block: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") outside " + detail::shape_of(src));
  Matrix out = src.middleCols(start, count);
  return push(std::move(out), needs(a), [a, start, count](GradTape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
    full.middleCols(start, count) = g;
    t.accumulate(a, full);
  });
}

Var GradTape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool req = false;
  for (Var p : parts) {
    if (value(p).rows() != rows) detail::throw_shape("concat_cols", value(parts[0]), value(p));
    cols += value(p).cols();
    req = req || needs(p);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, value(p).cols()) = value(p);
    at += value(p).cols();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return push(std::move(out), req, [owned](GradTape& t, const Matrix& g) {
    Eigen::Index offset = 0;
    for (Var p : owned) {
      const Eigen::Index c = t.value(p).cols();
      if (t.needs(p)) t.accumulate(p, g.middleCols(offset, c));
      offset += c;
    }
  });
}

Var GradTape::reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  const Matrix& src = value(a);
  if (rows * cols != src.size())
    throw ShapeError("reshape: cannot view " + detail::shape_of(src) + " as " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  Matrix out = src.reshaped<Eigen::RowMajor>(rows, cols);
  return push(std::move(out), needs(a), [a](GradTape& t, const Matrix& g) {
    const Matrix& s = t.value(a);
    t.accumulate(a, g.reshaped<Eigen::RowMajor>(s.rows(), s.cols()));
  });
}

Var GradTape::cross_entropy(Var logits, std::span<const int> labels) {
  const Matrix& z = value(logits);
  if (static_cast<Eigen::Index>(labels.size()) != z.rows())
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     detail::shape_of(z) + " logits");
  if (z.rows() == 0) throw DataError("cross_entropy: empty batch");
  Matrix probs(z.rows(), z.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols())
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                      std::to_string(z.cols()) + ")");
    const double peak = z.row(i).maxCoeff();
    probs.row(i) = (z.row(i).array() - peak).exp().matrix();
    const double norm = probs.row(i).sum();
    probs.row(i) /= norm;
    total += std::log(norm) + peak - z(i, y);
  }
  const double batch = static_cast<double>(z.rows());
  Matrix out(1, 1);
  out(0, 0) = total / batch;
  std::vector<int> owned(labels.begin(), labels.end());
  return push(std::move(out), needs(logits),
              [logits, owned = std::move(owned), probs = std::move(probs), batch](
                  GradTape& t, const Matrix& g) {
                Matrix d = probs;
                for (std::size_t i = 0; i < owned.size(); ++i)
                  d(static_cast<Eigen::Index>(i), owned[i]) -= 1.0;
                t.accumulate(logits, d * (g(0, 0) / batch));
              });
}

Var GradTape::sum_squares(Var a) {
  Matrix out(1, 1);
  out(0, 0) = value(a).squaredNorm();
  return push(std::move(out), needs(a), [a](GradTape& t, const Matrix& g) {
    t.accumulate(a, t.value(a) * (2.0 * g(0, 0)));
  });
}

void GradTape::backward(Var output) {
  if (value(output).size() != 1) throw ShapeError("backward: output must be 1x1");
  for (Node& n : nodes_) n.grad.resize(0, 0);
  if (!needs(output)) return;
  nodes_[output.index].grad = Matrix::Ones(1, 1);
  for (std::size_t i = output.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backprop || n.grad.size() == 0) continue;
    // Copy: the closure may accumulate into nodes_ but never resizes it.
    const Matrix upstream = n.grad;
    n.backprop(*this, upstream);
  }
}

Matrix GradTape::grad(Var v) const {
  const Node& n = nodes_[v.index];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

}  // namespace ftpg
