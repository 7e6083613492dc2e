#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "ftpg/tensor.hpp"

namespace ftpg {

/// Handle to a value recorded on a GradTape.
struct Var {
  std::size_t index = 0;
};

/// Reverse-mode tape over exactly the primitives the prompt models need.
///
/// Every op evaluates eagerly and records a closure that pushes the upstream
/// gradient into its inputs. backward() replays the closures in reverse
/// order. A tape is single-use and single-threaded.
class GradTape {
 public:
  Var constant(Matrix value);
  Var parameter(Matrix value);

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var add_row(Var a, Var row);  // broadcast a 1 x cols row over a
  Var scale(Var a, double factor);
  Var relu(Var a);
  Var row_softmax(Var a, double scale);
  Var layer_norm(Var x, Var gamma, Var beta, double eps);
  Var cosine_rows(Var a, Var b);
  Var col_block(Var a, Eigen::Index start, Eigen::Index count);
  Var concat_cols(std::span<const Var> parts);
  Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);  // row-major reinterpretation
  Var cross_entropy(Var logits, std::span<const int> labels);  // mean NLL, 1 x 1
  Var sum_squares(Var a);                                      // 1 x 1

  const Matrix& value(Var v) const { return nodes_[v.index].value; }
  double scalar(Var v) const { return nodes_[v.index].value(0, 0); }

  /// Seeds d(output)/d(output) = 1 and propagates; output must be 1 x 1.
  void backward(Var output);

  /// Gradient of the last backward() output w.r.t. v (zeros if unreached).
  Matrix grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  using Backprop = std::function<void(GradTape&, const Matrix& upstream)>;

  struct Node {
    Matrix value;
    Matrix grad;  // empty until something flows in
    bool requires_grad = false;
    Backprop backprop;
  };

  Var push(Matrix value, bool requires_grad, Backprop backprop);
  bool needs(Var v) const { return nodes_[v.index].requires_grad; }
  void accumulate(Var v, const Matrix& g);

  std::vector<Node> nodes_;
};

}  // namespace ftpg
