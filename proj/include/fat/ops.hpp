#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fat/tensor.hpp"

namespace fat {

struct Node;
using Var = std::shared_ptr<Node>;

/// One value in a recorded computation. When a Tape is active and an input
/// requires gradients, ops attach their inputs and a local adjoint rule;
/// otherwise nodes are detached and the graph is garbage-collected as
/// evaluation proceeds.
struct Node {
    Tensor value;
    Tensor grad;  // lazily allocated during backward
    std::vector<Var> inputs;
    std::function<void(Node&)> backward;
    bool requires_grad = false;
    i64 tape_id = -1;
};

/// Reverse-mode tape. Activates itself on construction (thread-local stack)
/// and records every differentiable op evaluated while alive. Operations are
/// stored in topological order and the backward pass visits each exactly once,
/// in reverse.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void push(const Var& v);
    void touch_leaf(const Var& v);

    /// d(output)/d(w) for each w in wrt. output must be scalar and every wrt
    /// tensor must have participated in the recorded computation.
    std::unordered_map<const Node*, Tensor> gradients(const Var& output,
                                                      const std::vector<Var>& wrt);

private:
    std::vector<Var> nodes_;
    std::unordered_set<const Node*> leaves_;
    Tape* prev_ = nullptr;
};

/// A differentiable leaf (parameter or watched input).
Var leaf(Tensor t);
/// A non-differentiable value.
Var constant(Tensor t);

Tensor& ensure_grad(Node& n);

// ---- elementwise ----
// Binary ops accept equal shapes, or b as a per-channel vector [C] broadcast
// over an NCHW a.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var sigmoid_op(const Var& a);
Var silu(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);  // tanh approximation

// ---- linear algebra ----
// 2-D [M,K]x[K,N] or batched 3-D [B,M,K]x[B,K,N].
Var matmul(const Var& a, const Var& b);
Var softmax_lastdim(const Var& a);
Var linear(const Var& x, const Var& w, const Var& b);  // x [N,Cin], w [Cout,Cin]

// ---- layout ----
Var reshape(const Var& a, std::vector<i64> shape);
Var permute(const Var& a, std::vector<i64> perm);
Var concat_channels(const Var& a, const Var& b);
Var slice_channels(const Var& a, i64 start, i64 count);

// ---- reductions ----
Var sum_all(const Var& a);   // -> [1]
Var mean_all(const Var& a);  // -> [1]

// ---- layers ----
// Cross-correlation with zero padding; grouped semantics. b may be null.
Var conv2d(const Var& x, const Var& w, const Var& b, i64 stride, i64 pad,
           i64 groups);
Var batchnorm_infer(const Var& x, const Var& gamma, const Var& beta,
                    const Var& running_mean, const Var& running_var, double eps);
// Normalizes over the channel axis per spatial position (NCHW input).
Var layernorm_nchw(const Var& x, const Var& gamma, const Var& beta, double eps);
// Normalizes each row of a [N,C] tensor.
Var layernorm_rows(const Var& x, const Var& gamma, const Var& beta, double eps);
Var global_avg_pool(const Var& x);  // [N,C,H,W] -> [N,C]
Var avg_pool2d(const Var& x, i64 kernel, i64 stride);

// Per-head softmax(Q K^T / sqrt(d)) V over flattened spatial positions, heads
// concatenated, no output projection. q [N,C,H,W]; k,v [N,C,h,w].
Var mhsa_pooled(const Var& q, const Var& k, const Var& v, i64 heads);
// Attention weights [N*heads, HW, hw] for the same computation (row-stochastic).
Tensor mhsa_attention_weights(const Tensor& q, const Tensor& k, i64 heads);

i64 conv_out_extent(i64 in, i64 kernel, i64 stride, i64 pad);

}  // namespace fat
