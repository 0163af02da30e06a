#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "flowscan/autodiff.hpp"
#include "flowscan/optim.hpp"
#include "flowscan/rng.hpp"

namespace flowscan {

// Stacked gated recurrence with a learned initial state. The update is
// h' = h + update_gate * candidate, so zero weights leave the state at its
// initial value exactly.
class GatedRecurrence {
 public:
  GatedRecurrence() = default;
  GatedRecurrence(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t input_dim,
                  std::size_t hidden, std::size_t layers);

  // One B x hidden state per layer.
  std::vector<autodiff::Var> initial_state(std::size_t batch) const;
  std::vector<autodiff::Var> advance(const std::vector<autodiff::Var>& state,
                                     const autodiff::Var& input) const;

  std::size_t hidden_dim() const { return hidden_; }
  std::size_t layer_count() const { return layers_.size(); }
  std::size_t input_dim() const { return input_; }

 private:
  struct Layer {
    autodiff::Var wu, bu, wc, bc, h0;
  };
  std::vector<Layer> layers_;
  std::size_t hidden_ = 0;
  std::size_t input_ = 0;
};

}  // namespace flowscan
