#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "morph/tensor.hpp"

namespace morph {

// Tape-based reverse-mode autodiff. Graphs are built dynamically per forward
// pass; leaf parameters outlive the graph and accumulate into .grad until an
// optimizer clears them. Nodes are created strictly after their parents, so
// creation order doubles as a topological order.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::uint64_t order = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  Tensor& ensure_grad() {
    if (grad.empty()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

using Var = std::shared_ptr<Node>;

Var make_var(Tensor value, bool requires_grad = false);
inline Var make_param(Tensor value) { return make_var(std::move(value), true); }
inline Var make_const(Tensor value) { return make_var(std::move(value), false); }
inline Var make_scalar(double v) { return make_const(Tensor::scalar(v)); }

// Accumulates gradients of `root` (a 1-element tensor) into every
// reachable node with requires_grad.
void backward(const Var& root);

// ---- elementwise / scalar ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
// wa*a + wb*b with both weights given explicitly; the elementwise sum is a
// single commutative addition, which keeps swap symmetry bitwise.
Var scale_add(const Var& a, const Var& b, double wa, double wb);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var sigmoid(const Var& a);
Var log_(const Var& a);
Var sqrt_(const Var& a);
Var abs_(const Var& a);
Var square(const Var& a);
Var clamp(const Var& a, double lo, double hi);

// ---- reductions / reshapes ----
Var sum(const Var& a);                    // -> [1]
Var mean(const Var& a);                   // -> [1]
Var sample_sum(const Var& a);             // [N,...] -> [N], sum per sample
Var row_sum(const Var& a);                // [N,D] -> [N]
Var reshape(const Var& a, std::vector<int> shape);
Var slice_rows(const Var& a, int begin, int count);  // [N,D] -> [count,D]
Var slice_cols(const Var& a, int begin, int count);  // [N,D] -> [N,count]

// ---- linear algebra / nn ----
Var matmul(const Var& a, const Var& b);   // [M,K]x[K,N] -> [M,N]
Var linear(const Var& x, const Var& w, const Var& b);  // [N,K],[K,M],[M] -> [N,M]
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta,
                Tensor& running_mean, Tensor& running_var, bool training,
                double momentum, double eps);
Var upsample_bilinear_x2(const Var& x);   // align-corners=false
Var channel_affine(const Var& x, const Var& gamma, const Var& beta);  // [N,C,H,W],[N,C],[N,C]
Var mul_mask(const Var& x, const Var& m);  // [N,C,H,W] * [N,1,H,W], mask broadcast over C
Var batch_tile(const Var& x, int n);      // [1,C,H,W] -> [N,C,H,W]
Var gram(const Var& x);                   // [N,C,H,W] -> [N,C,C], scaled by 1/(C*H*W)
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels);
Var rowwise_cosine_distance(const Var& a, const Var& b);  // [N,D],[N,D] -> [N]

}  // namespace morph
