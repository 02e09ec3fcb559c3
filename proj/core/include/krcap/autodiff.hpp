#pragma once

#include <functional>
#include <vector>

#include "krcap/tensor.hpp"

namespace krcap::ad {

// Handle into a Tape. Default-constructed handles are invalid.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Ops evaluate eagerly and record a pullback; backward()
// walks the tape once in reverse, accumulating gradients into every node
// that (transitively) depends on a differentiable leaf. Evaluation order is
// fixed, so results are bit-for-bit reproducible.
class Tape {
public:
  // Leaves. constant() never receives gradient; leaf() does.
  Var constant(Tensor value);
  Var leaf(Tensor value);

  // Elementwise and shape ops.
  Var add(Var a, Var b);                    // same shape
  Var sub(Var a, Var b);                    // same shape
  Var mul(Var a, Var b);                    // same shape, elementwise
  Var affine(Var x, double alpha, double beta);  // alpha*x + beta
  Var add_rowvec(Var m, Var row);           // m(r,c) + row(0,c)
  Var add_const(Var m, const Tensor& c);    // m + constant tensor
  Var slice_cols(Var m, int c0, int c1);    // columns [c0, c1)
  Var concat_cols(const std::vector<Var>& parts);
  Var gather_rows(Var table, std::vector<int> ids);

  // Linear algebra.
  Var matmul(Var a, Var b);     // a (m x k) * b (k x n)
  Var matmul_nt(Var a, Var b);  // a (m x k) * b^T, b (n x k)

  // Nonlinearities (elementwise).
  Var gelu(Var x);      // tanh approximation
  Var sigmoid(Var x);
  Var softplus(Var x);  // log(1 + e^x), numerically stable
  Var square(Var x);

  // Row-wise normalizations.
  Var row_softmax(Var x);
  Var row_log_softmax(Var x);
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

  // Reductions to 1x1 scalars.
  Var reduce_sum(Var x);
  Var reduce_mean(Var x);
  Var reduce_max(Var x);                         // gradient flows to the argmax entry
  Var select_column(Var m, int col);             // rows x 1
  Var weighted_sum(Var x, const Tensor& w);      // sum_ij w_ij * x_ij

  // Accessors.
  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
  double scalar(Var v) const { return nodes_[v.id].value.a[0]; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  size_t node_count() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and runs the reverse sweep. `loss` must be 1x1.
  void backward(Var loss);

private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Tape&)> pullback;  // empty for leaves/constants
    bool requires_grad = false;
  };

  Var push(Tensor value, bool requires_grad, std::function<void(Tape&)> pullback);
  Tensor& grad_buf(Var v) { return nodes_[v.id].grad; }

  std::vector<Node> nodes_;
};

}  // namespace krcap::ad
