#include "ftpg/tensor.hpp"

#include <algorithm>

namespace ftpg {

Vector sgd_momentum_step(const Vector& params, const Vector& grads, Vector& velocity,
                         const SgdHyper& hyper) {
  if (grads.size() != params.size() || velocity.size() != params.size()) {
    throw ShapeError("sgd_momentum_step: params/grads/velocity lengths " +
                     std::to_string(params.size()) + "/" + std::to_string(grads.size()) + "/" +
                     std::to_string(velocity.size()) + " differ");
  }
  if (!(hyper.lr >= 0.0)) throw ParameterError("sgd_momentum_step: lr must be >= 0");
  velocity = hyper.momentum * velocity + (grads + hyper.weight_decay * params);
  return params - hyper.lr * velocity;
}

Vector finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& theta,
                        double h) {
  if (!(h > 0.0)) throw ParameterError("finite_diff_grad: h must be > 0");
  Vector grad(theta.size());
  Vector probe = theta;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    probe(i) = theta(i) + h;
    const double up = f(probe);
    probe(i) = theta(i) - h;
    const double down = f(probe);
    probe(i) = theta(i);
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_grad: non-finite function value at coordinate " +
                         std::to_string(i));
    }
    grad(i) = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(const Vector& a, const Vector& b) {
  const double denom = std::max(a.norm(), b.norm());
  if (denom == 0.0) return 0.0;
  return (a - b).norm() / denom;
}

}  // namespace ftpg
