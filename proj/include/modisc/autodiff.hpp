#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "modisc/tensor.hpp"

namespace modisc::ad {

// Reverse-mode autodiff over Tensor values. The graph is a DAG of
// shared_ptr nodes built during the forward pass; creation order is a
// valid topological order, so backward() walks ids in reverse.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily in backward()
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;  // accumulates into parents' grads
    std::string name;
    std::uint64_t id = 0;
};

Var constant(Tensor v, std::string name = "");
Var leaf(Tensor v, std::string name = "");  // differentiable input / parameter
Var make_node(Tensor value, std::vector<Var> parents,
              std::function<void(Node&)> backprop, std::string name = "");

// Accumulates gradients of a scalar loss into every reachable leaf.
// Throws std::runtime_error naming the node if a non-finite gradient
// appears.
void backward(const Var& loss);

// Elementwise, same shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

// a: [N,M], bias: [M], broadcast over rows.
Var add_rowvec(const Var& a, const Var& bias);

// General matrix product with optional transposes. a: 2D, b: 2D.
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh_v(const Var& a);

// Softmax over the last axis of a 2D tensor.
Var softmax_rows(const Var& a);

// Per-row normalization to zero mean / unit variance followed by an
// affine map with gain/bias of width M.
Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps = 1e-6);

// Divide each column by (its sum + eps); used for attention-weighted means.
Var normalize_columns(const Var& a, double eps = 1e-8);

// x: [C,H,W], w: [O,C,kh,kw], b: [O]. Zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

// Nearest-neighbor 2x upsampling of [C,H,W].
Var upsample_nearest2(const Var& x);

// Layout change between image tensors [C,H,W] and position-major
// matrices [H*W, C].
Var chw_to_nc(const Var& x);
Var nc_to_chw(const Var& x, int h, int w);

// Column j of a [N,M] tensor as an [N] vector.
Var select_column(const Var& a, int j);

// Mean of squared difference against a constant target; scalar output.
Var mse_against(const Var& pred, const Tensor& target);

Var sum_all(const Var& a);

}  // namespace modisc::ad
