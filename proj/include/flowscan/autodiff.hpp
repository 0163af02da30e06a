#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "flowscan/tensor.hpp"

namespace flowscan {
namespace autodiff {

class Node;
using Var = std::shared_ptr<Node>;

// Edge to a parent node: pull() accumulates this node's contribution to the
// parent's gradient, given the gradient of the node that owns the edge.
struct Parent {
  Var node;
  std::function<void(const Tensor& out_grad, Tensor& parent_grad)> pull;
};

// A value in the reverse-mode differentiation graph.
class Node {
 public:
  Tensor value;
  Tensor grad;  // materialized lazily; empty until first needed
  bool requires_grad{false};
  const char* op{"leaf"};
  std::vector<Parent> parents;

  bool has_grad() const { return grad.numel() != 0; }
  void ensure_grad() {
    if (!has_grad()) grad = Tensor(value.shape());
  }
  void clear_grad() { grad = Tensor(); }
};

// Leaf that participates in differentiation (a parameter).
Var leaf(Tensor value);
// Leaf that does not (data, frozen values).
Var constant(Tensor value);

// While alive, ops create plain constants and record no graph edges.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Check every op result for NaN/Inf (throws NumericError naming the op).
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// Elementwise binary ops with numpy-style broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var add(const Var& a, double b);
Var sub(const Var& a, double b);
Var sub(double a, const Var& b);
Var mul(const Var& a, double b);
Var div(const Var& a, double b);
Var neg(const Var& a);

// 2-D matrix product: (M x K) . (K x N) -> (M x N).
Var matmul(const Var& a, const Var& b);

// Elementwise nonlinearities.
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var leaky_relu(const Var& a, double slope);

// Reductions. axis variants keep or drop the reduced extent.
Var sum(const Var& a);  // all elements -> scalar
Var sum(const Var& a, std::size_t axis, bool keepdims = false);
Var mean(const Var& a, std::size_t axis, bool keepdims = false);
Var max(const Var& a, std::size_t axis, bool keepdims = false);
Var logsumexp(const Var& a, std::size_t axis, bool keepdims = false);
Var softmax(const Var& a, std::size_t axis);

// Shape plumbing.
Var reshape(const Var& a, std::vector<std::size_t> shape);
Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var repeat(const Var& a, std::size_t axis, std::size_t times);

// Gather/scatter by index along an axis. Indices are shared across the
// outer dimensions. index_scatter is the adjoint of index_select: it places
// slice i of `a` at position indices[i] of an axis with extent `out_extent`
// (unnamed positions are zero; duplicate indices accumulate).
Var index_select(const Var& a, std::size_t axis, std::vector<std::size_t> indices);
Var index_scatter(const Var& a, std::size_t axis, std::vector<std::size_t> indices,
                  std::size_t out_extent);

// Per-batch row gather for B x n x d tensors: out[b][j] = a[b][perm[b*n + j]].
Var batch_gather_rows(const Var& a, std::vector<std::size_t> perm);

// Populates gradients of everything reachable from a scalar loss.
void backward(const Var& loss);

}  // namespace autodiff
}  // namespace flowscan
