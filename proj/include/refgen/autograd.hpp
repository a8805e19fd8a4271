#pragma once

// Reverse-mode autodiff over dense double tensors.
//
// Graphs are built from a small set of primitives, each with a hand-written
// backward. Gradients only flow into nodes whose input cone contains a
// trainable leaf; frozen leaves never receive a gradient buffer at all, so
// "no grad" is observable, not just zero.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "refgen/tensor.hpp"

namespace refgen::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // empty until backward reaches this node
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;  // scatter node.grad into parents
    std::string op;

    bool has_grad() const { return !grad.empty(); }
    // Allocate-if-needed accumulation used by every backward_fn.
    static void accum(const Var& p, const Tensor& delta);
};

// Leaves. A constant never requires grad; a param does.
Var leaf(Tensor v, bool requires_grad, std::string name = "leaf");
Var constant(Tensor v);
Var param(Tensor v);

// Elementwise, shapes must match.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var silu(const Var& a);

// Reductions.
Var mean_all(const Var& a);  // -> shape [1]

// 2-D matrix ops. matmul_nt computes A @ B^T so weight matrices can be
// stored row-major as [out, in].
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var softmax_rows(const Var& a);
Var transpose2(const Var& a);
Var add_row_bias(const Var& x, const Var& b);

// Shape surgery. slice/concat support axis 0/1 on rank-2 and axis 0 on
// rank-3 tensors (the channel axis).
Var reshape(const Var& a, std::vector<int64_t> shape);
Var slice(const Var& a, int axis, int64_t start, int64_t len);
Var concat(const std::vector<Var>& xs, int axis);

// Image-shaped [C,H,W] ops.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample2(const Var& x);  // nearest-neighbor x2
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
Var add_channel_bias(const Var& x, const Var& b);

// Composites (no backward of their own).
Var linear(const Var& x, const Var& w, const Var& b);       // x[T,K] @ w[N,K]^T + b
Var to_tokens(const Var& x);                                // [C,H,W] -> [H*W,C]
Var from_tokens(const Var& t, int64_t h, int64_t w);        // [T,C] -> [C,H,W]

// Run reverse-mode accumulation from a scalar root (numel 1). Leaf grads
// are accumulated, not reset; callers clear them between steps.
void backward(const Var& root);

}  // namespace refgen::ag
