#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "flowscan/base_density.hpp"
#include "flowscan/optim.hpp"
#include "flowscan/scan.hpp"
#include "flowscan/set_batch.hpp"
#include "flowscan/transforms.hpp"

namespace flowscan {

enum class BaseKind : std::uint8_t {
  Scan,  // recurrent conditionals over the sorted sequence
  Iid,   // every point scored independently by one shared density
  Flat,  // free mixture per flat coordinate of the sorted vector
};

// Full model description. The equivariant stack is an ordered list of
// descriptors:
//   eq_linear | eq_softmax | leaky_relu:<slope> | coupling:<parity> |
//   set_coupling:<parity>
// with parity 0 transforming even coordinate indices and 1 the odd ones.
struct FlowScanConfig {
  std::size_t dim = 2;
  // Expected points per set. 0 accepts any cardinality; the flat base needs
  // a fixed value.
  std::size_t cardinality = 0;
  std::vector<std::string> equivariant;
  std::size_t correspondence_depth = 2;
  bool recurrent_coupling = false;
  std::size_t sort_key = 1;  // counts from 1
  std::size_t hidden = 64;
  std::size_t mixture = 10;
  std::size_t layers = 2;
  std::size_t coupling_hidden = 64;
  std::size_t embed_dim = 32;
  BaseKind base = BaseKind::Scan;
  std::uint64_t init_seed = 1;

  // Standard stack for the dimension: scale/mean layers around coordinate
  // couplings when d >= 2, scale/mean layers only when d == 1.
  static FlowScanConfig defaults(std::size_t dim);

  void validate() const;
  std::string to_json() const;
  static FlowScanConfig from_json(const std::string& text);
};

// Exchangeable density over point sets: equivariant invertible stack, stable
// sort with the 1/n! correction, couplings between adjacent sorted rows, and
// an autoregressive base over the result. The i.i.d. base skips the sort
// entirely; it is exchangeable because every point is scored by the same
// per-point density.
class FlowScanModel {
 public:
  explicit FlowScanModel(FlowScanConfig config);

  FlowScanModel(FlowScanModel&&) = default;
  FlowScanModel& operator=(FlowScanModel&&) = default;

  const FlowScanConfig& config() const { return config_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  std::size_t step() const { return step_; }
  void set_step(std::size_t step) { step_ = step; }

  // B x n x d -> B. Differentiable; sets with a single point skip the pair
  // couplings (there is nothing to pair).
  autodiff::Var log_prob(const autodiff::Var& x) const;
  Tensor log_prob(const SetBatch& x) const;

  // log_prob / n.
  autodiff::Var ppll(const autodiff::Var& x) const;
  Tensor ppll(const SetBatch& x) const;

  // One set of n points: base draw, then the inverse stacks. The returned
  // rows are shuffled, purely cosmetically, since the output is a set.
  SetBatch sample(std::size_t n, Rng& rng) const;

  void save(const std::string& path) const;
  static FlowScanModel load(const std::string& path);

 private:
  void check_schema(const autodiff::Var& x) const;

  FlowScanConfig config_;
  ParamStore store_;
  Compose equivariant_;
  Compose correspondence_;
  std::unique_ptr<BaseDensity> base_;
  std::unique_ptr<FlatBase> flat_;
  std::size_t step_ = 0;
};

}  // namespace flowscan
