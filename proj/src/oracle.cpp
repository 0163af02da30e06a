#include "flowscan/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flowscan/errors.hpp"

namespace flowscan {
namespace oracle {

namespace {

double logsumexp_vec(const std::vector<double>& values) {
  const double shift = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(shift)) return shift;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - shift);
  return shift + std::log(acc);
}

double log_normal(double v, double mean, double sd) {
  static const double log_2pi = std::log(2.0 * std::acos(-1.0));
  const double z = (v - mean) / sd;
  return -0.5 * log_2pi - std::log(sd) - 0.5 * z * z;
}

}  // namespace

double perm_avg_log_prob(const SequentialDensity& p_seq, const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("permutation average expects an n x d matrix");
  const std::size_t n = x.extent(0);
  const std::size_t d = x.extent(1);
  if (n > 9) {
    throw TractabilityError("permutation averaging over n = " + std::to_string(n) +
                            " needs n! terms; capped at n = 9");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> terms;
  Tensor permuted({n, d});
  do {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) permuted[i * d + j] = x[order[i] * d + j];
    }
    terms.push_back(p_seq(permuted));
  } while (std::next_permutation(order.begin(), order.end()));
  double log_factorial = 0.0;
  for (std::size_t k = 2; k <= n; ++k) log_factorial += std::log(static_cast<double>(k));
  return logsumexp_vec(terms) - log_factorial;
}

double sinusoid_log_density(const Tensor& x, double noise_scale) {
  if (x.rank() != 2 || x.extent(1) != 2) {
    throw ShapeError("sinusoid density expects an n x 2 matrix");
  }
  if (!(noise_scale > 0.0)) {
    throw ConfigError("sinusoid density needs a positive noise scale");
  }
  const std::size_t n = x.extent(0);
  if (n < 2) throw ShapeError("sinusoid density needs n >= 2");
  const double pi = std::acos(-1.0);
  const double sd = noise_scale / static_cast<double>(n);
  const double phase_sd = sd * std::sqrt(1.0 + (pi / 3.0) * (pi / 3.0));
  const double amp = x[0];
  const double phase = x[1];
  double logp = log_normal(amp, 2.0, sd) + log_normal(phase, 0.0, phase_sd);
  for (std::size_t k = 2; k <= n; ++k) {
    const double angle = pi * static_cast<double>(k) / static_cast<double>(n);
    logp += log_normal(x[(k - 1) * 2], amp * std::cos(angle), sd);
    logp += log_normal(x[(k - 1) * 2 + 1], std::cos(angle + phase), sd);
  }
  return logp;
}

std::vector<double> ground_truth_sinusoid_ppll(const SetDataset& dataset, double noise_scale) {
  std::vector<double> ppll;
  ppll.reserve(dataset.sets.size());
  const SequentialDensity density = [noise_scale](const Tensor& ordered) {
    return sinusoid_log_density(ordered, noise_scale);
  };
  for (const Tensor& set : dataset.sets) {
    const double logp = perm_avg_log_prob(density, set);
    ppll.push_back(logp / static_cast<double>(set.extent(0)));
  }
  return ppll;
}

double grid_normalization(const std::function<double(const std::vector<double>&)>& logp,
                          const GridBox& box, std::size_t resolution) {
  const std::size_t d = box.lo.size();
  if (d == 0 || box.hi.size() != d) throw ConfigError("grid box needs matching lo/hi bounds");
  if (resolution < 2) throw ConfigError("grid needs at least 2 points per axis");
  double total_points = 1.0;
  for (std::size_t j = 0; j < d; ++j) {
    if (!(box.lo[j] < box.hi[j])) throw ConfigError("grid box bounds out of order");
    total_points *= static_cast<double>(resolution);
  }
  if (total_points > 1e7) {
    throw ConfigError("grid budget exceeded: " + std::to_string(total_points) + " points");
  }
  std::vector<double> step(d);
  for (std::size_t j = 0; j < d; ++j) {
    step[j] = (box.hi[j] - box.lo[j]) / static_cast<double>(resolution - 1);
  }
  std::vector<std::size_t> idx(d, 0);
  std::vector<double> point(d);
  double acc = 0.0;
  while (true) {
    double weight = 1.0;
    for (std::size_t j = 0; j < d; ++j) {
      point[j] = box.lo[j] + step[j] * static_cast<double>(idx[j]);
      const bool edge = idx[j] == 0 || idx[j] + 1 == resolution;
      weight *= (edge ? 0.5 : 1.0) * step[j];
    }
    acc += weight * std::exp(logp(point));
    std::size_t axis = d;
    while (axis-- > 0) {
      if (++idx[axis] < resolution) break;
      idx[axis] = 0;
      if (axis == 0) return acc;
    }
  }
}

double fd_jacobian_logdet(const std::function<Tensor(const Tensor&)>& map, const Tensor& x,
                          double step) {
  const std::size_t m = x.numel();
  if (m == 0 || m > 64) {
    throw TractabilityError("dense Jacobian limited to 1..64 variables, got " +
                            std::to_string(m));
  }
  std::vector<double> jac(m * m);
  Tensor probe = x;
  for (std::size_t j = 0; j < m; ++j) {
    const double saved = probe[j];
    probe[j] = saved + step;
    const Tensor hi = map(probe);
    probe[j] = saved - step;
    const Tensor lo = map(probe);
    probe[j] = saved;
    if (hi.numel() != m || lo.numel() != m) {
      throw ShapeError("Jacobian map must preserve element count");
    }
    for (std::size_t i = 0; i < m; ++i) {
      jac[i * m + j] = (hi[i] - lo[i]) / (2.0 * step);
    }
  }
  // LU with partial pivoting; log |det| is the sum of log |pivot|.
  // Central differences carry rounding noise around eps * |f| / step, about
  // 1e-11 at unit scale, so the singularity cutoff sits well above that.
  double scale = 0.0;
  for (double v : jac) scale = std::max(scale, std::fabs(v));
  const double tolerance = 1e-8 * std::max(1.0, scale);
  double log_abs_det = 0.0;
  for (std::size_t col = 0; col < m; ++col) {
    std::size_t pivot = col;
    for (std::size_t row = col + 1; row < m; ++row) {
      if (std::fabs(jac[row * m + col]) > std::fabs(jac[pivot * m + col])) pivot = row;
    }
    const double pivot_value = jac[pivot * m + col];
    if (std::fabs(pivot_value) < tolerance) {
      throw NumericError("finite-difference Jacobian is singular at this point");
    }
    if (pivot != col) {
      for (std::size_t k = 0; k < m; ++k) std::swap(jac[pivot * m + k], jac[col * m + k]);
    }
    log_abs_det += std::log(std::fabs(pivot_value));
    for (std::size_t row = col + 1; row < m; ++row) {
      const double factor = jac[row * m + col] / pivot_value;
      for (std::size_t k = col; k < m; ++k) jac[row * m + k] -= factor * jac[col * m + k];
    }
  }
  return log_abs_det;
}

std::map<std::string, Tensor> fd_gradient(const std::function<double()>& loss, ParamStore& params,
                                          double step) {
  std::map<std::string, Tensor> grads;
  for (const auto& [name, node] : params.params()) {
    Tensor grad(node->value.shape());
    for (std::size_t i = 0; i < node->value.numel(); ++i) {
      const double saved = node->value[i];
      node->value[i] = saved + step;
      const double hi = loss();
      node->value[i] = saved - step;
      const double lo = loss();
      node->value[i] = saved;
      grad[i] = (hi - lo) / (2.0 * step);
    }
    grads.emplace(name, std::move(grad));
  }
  return grads;
}

}  // namespace oracle
}  // namespace flowscan
