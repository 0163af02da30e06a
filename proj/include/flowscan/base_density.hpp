#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "flowscan/autodiff.hpp"
#include "flowscan/optim.hpp"
#include "flowscan/recurrence.hpp"
#include "flowscan/rng.hpp"
#include "flowscan/transforms.hpp"

namespace flowscan {

// Autoregressive density over ordered point sequences. A gated recurrence
// carries a summary of earlier points; each coordinate of the current point
// is scored by a mixture of normals whose parameters come from a perceptron
// over the state and the already-scored coordinates of the same point.
//
// Per dimension the head emits K logits, K means and K raw log scales; the
// log scales pass through a smooth clamp so densities stay bounded. With
// zero-weight heads every conditional is a standard normal. Mean biases are
// spread out at construction so the mixture components are distinguishable
// from the first gradient step.
class BaseDensity {
 public:
  using State = std::vector<autodiff::Var>;

  BaseDensity(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t dim,
              std::size_t hidden = 64, std::size_t mixture = 10, std::size_t layers = 2);

  State initial_state(std::size_t batch) const;
  State advance(const State& state, const autodiff::Var& point) const;  // point: B x d

  // Log density of one point under the conditionals at `state`. B x d -> B.
  autodiff::Var point_log_prob(const autodiff::Var& point, const State& state) const;

  // Chained log density of ordered sequences. B x n x d -> B.
  autodiff::Var sequence_log_prob(const autodiff::Var& z) const;

  // Same points scored independently at the initial state; order never
  // enters, so the result is exchangeable on its own.
  autodiff::Var iid_log_prob(const autodiff::Var& z) const;

  // Ancestral draws. n x d.
  Tensor sequence_sample(std::size_t n, Rng& rng) const;
  Tensor iid_sample(std::size_t n, Rng& rng) const;

  std::size_t dim() const { return d_; }
  std::size_t mixture() const { return mixture_; }
  std::size_t hidden_dim() const { return rec_.hidden_dim(); }

 private:
  autodiff::Var coordinate_log_prob(const autodiff::Var& heads, const autodiff::Var& value) const;
  double sample_coordinate(const Tensor& heads, Rng& rng) const;

  std::size_t d_ = 0;
  std::size_t mixture_ = 0;
  GatedRecurrence rec_;
  std::vector<Mlp> dim_nets_;
  double log_scale_limit_ = 7.0;
};

// Mixture density over the flattened coordinate vector of a fixed-cardinality
// set: every flat position gets its own free mixture of normals, independent
// across positions. Deliberately ignores the shared structure between points;
// serves as the unstructured baseline.
class FlatBase {
 public:
  FlatBase(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t dim,
           std::size_t cardinality, std::size_t mixture = 10);

  autodiff::Var log_prob(const autodiff::Var& z) const;  // B x n x d -> B
  Tensor sample(Rng& rng) const;                         // n x d

  std::size_t dim() const { return d_; }
  std::size_t schema_cardinality() const { return n_; }

 private:
  std::size_t d_ = 0;
  std::size_t n_ = 0;
  std::size_t mixture_ = 0;
  autodiff::Var logits_, means_, raw_scales_;  // each (n*d) x K
  double log_scale_limit_ = 7.0;
};

}  // namespace flowscan
