#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "flowscan/datasets.hpp"
#include "flowscan/optim.hpp"
#include "flowscan/tensor.hpp"

namespace flowscan {
namespace oracle {

// Log density over an ordered n x d matrix.
using SequentialDensity = std::function<double(const Tensor&)>;

// Exact log of the permutation-averaged density: log (1/n!) sum over all n!
// row orders of exp(p_seq(reordered x)). Enumerates every permutation, so n
// is capped at 9.
double perm_avg_log_prob(const SequentialDensity& p_seq, const Tensor& x);

// Closed-form log density of one ordered draw from the sinusoid generator
// (row 1 carries amplitude and phase, later rows follow the cosine path).
double sinusoid_log_density(const Tensor& x, double noise_scale = 1.0);

// Exact exchangeable per-point log likelihood of each set in a sinusoid
// dataset, via full permutation averaging of the closed-form density.
std::vector<double> ground_truth_sinusoid_ppll(const SetDataset& dataset,
                                               double noise_scale = 1.0);

struct GridBox {
  std::vector<double> lo;
  std::vector<double> hi;
};

// Trapezoidal estimate of the integral of exp(logp) over an axis-aligned
// box, `resolution` points per axis. Refuses more than 1e7 grid points.
double grid_normalization(const std::function<double(const std::vector<double>&)>& logp,
                          const GridBox& box, std::size_t resolution);

// log |det| of the dense central-difference Jacobian of `map` at x. The map
// must preserve element count; total size is capped at 64. Throws if the
// numerical Jacobian is singular.
double fd_jacobian_logdet(const std::function<Tensor(const Tensor&)>& map, const Tensor& x,
                          double step = 1e-5);

// Central-difference gradient of `loss` with respect to every parameter in
// the store, evaluated by perturbing stored values in place.
std::map<std::string, Tensor> fd_gradient(const std::function<double()>& loss, ParamStore& params,
                                          double step = 1e-5);

}  // namespace oracle
}  // namespace flowscan
