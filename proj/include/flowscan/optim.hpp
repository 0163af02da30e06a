#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "flowscan/autodiff.hpp"
#include "flowscan/rng.hpp"
#include "flowscan/tensor.hpp"

namespace flowscan {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Named registry of trainable leaves. Names are unique and iterated in
// lexicographic order everywhere, which keeps checkpoints and update order
// reproducible across runs.
class ParamStore {
 public:
  // Registers a new leaf initialised with `init`. Throws if the name exists.
  autodiff::Var param(const std::string& name, Tensor init);

  autodiff::Var get(const std::string& name) const;
  bool has(const std::string& name) const;

  const std::map<std::string, autodiff::Var>& params() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t count_scalars() const;

  // Overwrites every parameter value with i.i.d. U[-scale, scale] draws,
  // visiting parameters in name order.
  void randomize_uniform(Rng& rng, double scale);

  void clear_grads();
  // Gives any parameter without a gradient a zero one (parameters the loss
  // does not reach still take part in the optimizer step).
  void zero_missing_grads();

  double grad_norm() const;
  // Scales all gradients so the global L2 norm is at most `max_norm`.
  // Returns the norm before clipping.
  double clip_grad_norm(double max_norm);

  // One Adam update over all parameters, then clears gradients. Every
  // parameter must have a gradient.
  void adam_step(const AdamConfig& config);

  // Resets optimizer moments and step counts.
  void reset_optimizer_state();

 private:
  struct AdamSlot {
    Tensor m;
    Tensor v;
    std::size_t t = 0;
  };

  std::map<std::string, autodiff::Var> params_;
  std::map<std::string, AdamSlot> slots_;
};

// Runs reverse-mode accumulation from `loss`, then zero-fills gradients for
// any registered parameter the loss did not reach.
void backward(const autodiff::Var& loss, ParamStore& store);

}  // namespace flowscan
