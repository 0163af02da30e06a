#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "flowscan/autodiff.hpp"
#include "flowscan/recurrence.hpp"
#include "flowscan/transforms.hpp"

namespace flowscan {

struct ScanResult {
  autodiff::Var sorted;                  // B x n x d, rows reordered per set
  std::vector<std::size_t> permutation;  // flat B*n; entry b*n+j is the input row
                                         // placed at sorted slot j of set b
  double correction = 0.0;               // -log n!, shared by every set in the batch
};

// -log n! accumulated in long double. n must be >= 1.
double factorial_correction(std::size_t n);

// Stable ascending sort of each set by one coordinate. key_dimension counts
// from 1 to match the configuration surface; ties keep input order. Gradients
// flow through the reordering.
ScanResult sort_scan(const autodiff::Var& x, std::size_t key_dimension);

enum class PairParity {
  EvenFromOdd,  // rows 0,2,4,... are rescaled/shifted from their right neighbour
  OddFromEven,  // rows 1,3,5,... are rescaled/shifted from their left neighbour
};

// Affine coupling between adjacent sorted rows. Pairs are (2j, 2j+1); with an
// odd cardinality the final row passes through untouched. Requires n >= 2.
class CorrespondenceCoupling : public Transform {
 public:
  CorrespondenceCoupling(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t dim,
                         PairParity parity, std::size_t hidden = 64);

  FlowResult forward(const autodiff::Var& x) const override;
  FlowResult inverse(const autodiff::Var& z) const override;
  std::string name() const override { return "correspondence"; }

 private:
  FlowResult apply(const autodiff::Var& x, bool inverse_mode) const;

  std::size_t dim_;
  PairParity parity_;
  Mlp net_;
};

// Affine coupling driven by a recurrent summary of the preceding rows. Row 0
// is unchanged; row i is rescaled/shifted from the state after rows < i. The
// inverse replays the recurrence on the reconstructed rows.
class RecurrentCoupling : public Transform {
 public:
  RecurrentCoupling(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t dim,
                    std::size_t hidden = 32, std::size_t layers = 1);

  FlowResult forward(const autodiff::Var& x) const override;
  FlowResult inverse(const autodiff::Var& z) const override;
  std::string name() const override { return "recurrent"; }

 private:
  std::size_t dim_;
  GatedRecurrence rec_;
  Mlp head_;
};

}  // namespace flowscan
