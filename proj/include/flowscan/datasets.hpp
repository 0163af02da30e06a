#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "flowscan/rng.hpp"
#include "flowscan/set_batch.hpp"
#include "flowscan/tensor.hpp"

namespace flowscan {

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

// A collection of point sets sharing a dimension d. Cardinality may vary
// across sets. Split labels are empty until assigned.
struct SetDataset {
  std::vector<Tensor> sets;      // each n_i x d
  std::vector<Split> splits;     // empty, or one label per set
  std::string metadata_json;     // generator provenance, "{}" if none

  SetDataset() : metadata_json("{}") {}

  std::size_t size() const { return sets.size(); }
  std::size_t dim() const;
  void validate() const;
  std::vector<std::size_t> indices_of(Split label) const;
  SetDataset subset(const std::vector<std::size_t>& indices) const;
};

// Noisy sampled sinusoid sets (d = 2): the first point carries latent
// amplitude and phase, the rest follow the cosine path, then rows are
// shuffled. noise_scale multiplies every noise standard deviation and exists
// for tests that want the noiseless mean path.
SetDataset gen_sinusoid(std::size_t N, std::size_t n, std::uint64_t seed,
                        double noise_scale = 1.0);

enum class CloudShape { Circle, Square };

// Sets of n points drawn i.i.d. on a shape boundary whose radius (and
// optionally center) is a latent per-set draw, plus isotropic Gaussian noise.
SetDataset gen_shape_clouds(std::size_t N, std::size_t n, CloudShape shape, double radius_min,
                            double radius_max, double noise_sd, std::uint64_t seed,
                            double center_box = 0.0);

void write_fset(const SetDataset& dataset, const std::string& path);
SetDataset read_fset(const std::string& path);

// Assigns train/val/test labels by a seeded shuffle. Fractions must be
// nonnegative and sum to one; boundaries use cumulative rounding.
SetDataset split(const SetDataset& dataset, double train_frac, double val_frac, double test_frac,
                 std::uint64_t seed);

// Adds i.i.d. Gaussian noise of the given standard deviation to every value.
SetDataset jitter(const SetDataset& dataset, double sd, std::uint64_t seed);

// CSV interchange: header "set_id,v1,...,vd", one row per point. Sets are
// ordered by first appearance of their id.
void write_csv(const SetDataset& dataset, const std::string& path);
SetDataset read_csv(const std::string& path);

// Stacks equal-cardinality sets into one B x n x d batch.
SetBatch stack_sets(const std::vector<Tensor>& sets);
SetBatch stack_sets(const SetDataset& dataset, const std::vector<std::size_t>& indices);

}  // namespace flowscan
