#include "flowscan/base_density.hpp"

#include <cmath>

#include "flowscan/errors.hpp"

namespace flowscan {

namespace ad = autodiff;

namespace {

constexpr double kHalfLog2Pi = 0.9189385332046727;

double clamp_log_scale(double raw, double limit) { return limit * std::tanh(raw / limit); }

// Picks a mixture component from unnormalized logits laid out contiguously.
std::size_t pick_component(const double* logits, std::size_t k, Rng& rng) {
  double top = logits[0];
  for (std::size_t i = 1; i < k; ++i) top = std::max(top, logits[i]);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) total += std::exp(logits[i] - top);
  const double u = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    acc += std::exp(logits[i] - top);
    if (u < acc) return i;
  }
  return k - 1;
}

}  // namespace

BaseDensity::BaseDensity(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t dim,
                         std::size_t hidden, std::size_t mixture, std::size_t layers)
    : d_(dim), mixture_(mixture), rec_(store, rng, prefix + ".rec", dim, hidden, layers) {
  if (dim == 0) throw ConfigError("base density needs d >= 1");
  if (mixture == 0) throw ConfigError("base density needs at least one mixture component");
  dim_nets_.reserve(dim);
  for (std::size_t j = 0; j < dim; ++j) {
    const std::string name = prefix + ".dim" + std::to_string(j);
    dim_nets_.emplace_back(store, rng, name, hidden + j, hidden, 3 * mixture);
    Tensor& bias = store.get(name + ".b2")->value;
    for (std::size_t k = 0; k < mixture; ++k) {
      bias[mixture + k] = 2.0 * rng.uniform() - 1.0;
    }
  }
}

BaseDensity::State BaseDensity::initial_state(std::size_t batch) const {
  return rec_.initial_state(batch);
}

BaseDensity::State BaseDensity::advance(const State& state, const ad::Var& point) const {
  return rec_.advance(state, point);
}

ad::Var BaseDensity::coordinate_log_prob(const ad::Var& heads, const ad::Var& value) const {
  const std::size_t k = mixture_;
  ad::Var logits = ad::slice(heads, 1, 0, k);
  ad::Var means = ad::slice(heads, 1, k, k);
  ad::Var log_scales = soft_clamp(ad::slice(heads, 1, 2 * k, k), log_scale_limit_);
  ad::Var log_mix = ad::sub(logits, ad::logsumexp(logits, 1, true));
  ad::Var z = ad::div(ad::sub(value, means), ad::exp(log_scales));
  ad::Var component =
      ad::sub(ad::sub(ad::mul(ad::mul(z, z), -0.5), log_scales), kHalfLog2Pi);
  return ad::logsumexp(ad::add(log_mix, component), 1);
}

ad::Var BaseDensity::point_log_prob(const ad::Var& point, const State& state) const {
  if (point->value.rank() != 2 || point->value.extent(1) != d_) {
    throw ShapeError("base density point must be batch x " + std::to_string(d_) + ", got " +
                     shape_to_string(point->value.shape()));
  }
  if (state.size() != rec_.layer_count()) {
    throw ShapeError("base density state has the wrong number of layers");
  }
  const ad::Var& h = state.back();
  if (h->value.extent(0) != point->value.extent(0)) {
    throw ShapeError("base density state and point batch sizes differ");
  }
  ad::Var total;
  for (std::size_t j = 0; j < d_; ++j) {
    ad::Var input = j == 0 ? h : ad::concat({h, ad::slice(point, 1, 0, j)}, 1);
    ad::Var heads = dim_nets_[j](input);
    ad::Var lp = coordinate_log_prob(heads, ad::slice(point, 1, j, 1));
    total = j == 0 ? lp : ad::add(total, lp);
  }
  return total;
}

ad::Var BaseDensity::sequence_log_prob(const ad::Var& z) const {
  if (z->value.rank() != 3 || z->value.extent(2) != d_) {
    throw ShapeError("base density expects a batch x n x " + std::to_string(d_) +
                     " tensor, got " + shape_to_string(z->value.shape()));
  }
  const std::size_t batch = z->value.extent(0);
  const std::size_t n = z->value.extent(1);
  State state = initial_state(batch);
  ad::Var total;
  for (std::size_t i = 0; i < n; ++i) {
    ad::Var point = ad::reshape(ad::slice(z, 1, i, 1), {batch, d_});
    ad::Var lp = point_log_prob(point, state);
    total = i == 0 ? lp : ad::add(total, lp);
    if (i + 1 < n) state = advance(state, point);
  }
  return total;
}

ad::Var BaseDensity::iid_log_prob(const ad::Var& z) const {
  if (z->value.rank() != 3 || z->value.extent(2) != d_) {
    throw ShapeError("base density expects a batch x n x " + std::to_string(d_) +
                     " tensor, got " + shape_to_string(z->value.shape()));
  }
  const std::size_t batch = z->value.extent(0);
  const std::size_t n = z->value.extent(1);
  State state = initial_state(batch);
  ad::Var total;
  for (std::size_t i = 0; i < n; ++i) {
    ad::Var point = ad::reshape(ad::slice(z, 1, i, 1), {batch, d_});
    ad::Var lp = point_log_prob(point, state);
    total = i == 0 ? lp : ad::add(total, lp);
  }
  return total;
}

double BaseDensity::sample_coordinate(const Tensor& heads, Rng& rng) const {
  const std::size_t k = mixture_;
  const std::size_t comp = pick_component(heads.data(), k, rng);
  const double mean = heads[k + comp];
  const double log_scale = clamp_log_scale(heads[2 * k + comp], log_scale_limit_);
  return mean + std::exp(log_scale) * rng.normal();
}

Tensor BaseDensity::sequence_sample(std::size_t n, Rng& rng) const {
  if (n == 0) throw ConfigError("cannot sample an empty sequence");
  ad::NoGradGuard guard;
  Tensor out({n, d_});
  State state = initial_state(1);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor point({std::size_t{1}, d_});
    const Tensor& h = state.back()->value;
    for (std::size_t j = 0; j < d_; ++j) {
      Tensor input({std::size_t{1}, h.extent(1) + j});
      for (std::size_t c = 0; c < h.extent(1); ++c) input[c] = h[c];
      for (std::size_t c = 0; c < j; ++c) input[h.extent(1) + c] = point[c];
      Tensor heads = dim_nets_[j](ad::constant(input))->value;
      point[j] = sample_coordinate(heads, rng);
    }
    for (std::size_t j = 0; j < d_; ++j) out[i * d_ + j] = point[j];
    if (i + 1 < n) state = advance(state, ad::constant(point));
  }
  return out;
}

Tensor BaseDensity::iid_sample(std::size_t n, Rng& rng) const {
  if (n == 0) throw ConfigError("cannot sample an empty sequence");
  ad::NoGradGuard guard;
  Tensor out({n, d_});
  State state = initial_state(1);
  const Tensor& h = state.back()->value;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor point({std::size_t{1}, d_});
    for (std::size_t j = 0; j < d_; ++j) {
      Tensor input({std::size_t{1}, h.extent(1) + j});
      for (std::size_t c = 0; c < h.extent(1); ++c) input[c] = h[c];
      for (std::size_t c = 0; c < j; ++c) input[h.extent(1) + c] = point[c];
      Tensor heads = dim_nets_[j](ad::constant(input))->value;
      point[j] = sample_coordinate(heads, rng);
    }
    for (std::size_t j = 0; j < d_; ++j) out[i * d_ + j] = point[j];
  }
  return out;
}

FlatBase::FlatBase(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t dim,
                   std::size_t cardinality, std::size_t mixture)
    : d_(dim), n_(cardinality), mixture_(mixture) {
  if (dim == 0 || cardinality == 0) throw ConfigError("flat base needs d >= 1 and n >= 1");
  if (mixture == 0) throw ConfigError("flat base needs at least one mixture component");
  const std::size_t total = dim * cardinality;
  logits_ = store.param(prefix + ".logits", Tensor({total, mixture}));
  Tensor means({total, mixture});
  for (std::size_t i = 0; i < means.numel(); ++i) means[i] = 2.0 * rng.uniform() - 1.0;
  means_ = store.param(prefix + ".means", means);
  raw_scales_ = store.param(prefix + ".raw_scales", Tensor({total, mixture}));
}

ad::Var FlatBase::log_prob(const ad::Var& z) const {
  if (z->value.rank() != 3 || z->value.extent(1) != n_ || z->value.extent(2) != d_) {
    throw ShapeError("flat base was built for sets shaped " + std::to_string(n_) + " x " +
                     std::to_string(d_) + ", got " + shape_to_string(z->value.shape()));
  }
  const std::size_t batch = z->value.extent(0);
  const std::size_t total = n_ * d_;
  ad::Var v = ad::reshape(z, {batch, total, std::size_t{1}});
  ad::Var log_mix = ad::reshape(ad::sub(logits_, ad::logsumexp(logits_, 1, true)),
                                {std::size_t{1}, total, mixture_});
  ad::Var log_scales =
      ad::reshape(soft_clamp(raw_scales_, log_scale_limit_), {std::size_t{1}, total, mixture_});
  ad::Var means = ad::reshape(means_, {std::size_t{1}, total, mixture_});
  ad::Var zs = ad::div(ad::sub(v, means), ad::exp(log_scales));
  ad::Var component =
      ad::sub(ad::sub(ad::mul(ad::mul(zs, zs), -0.5), log_scales), kHalfLog2Pi);
  ad::Var per_position = ad::logsumexp(ad::add(log_mix, component), 2);  // B x total
  return ad::sum(per_position, 1);
}

Tensor FlatBase::sample(Rng& rng) const {
  ad::NoGradGuard guard;
  Tensor out({n_, d_});
  const Tensor& logits = logits_->value;
  const Tensor& means = means_->value;
  const Tensor& raw = raw_scales_->value;
  for (std::size_t t = 0; t < n_ * d_; ++t) {
    const std::size_t comp = pick_component(logits.data() + t * mixture_, mixture_, rng);
    const double log_scale = clamp_log_scale(raw[t * mixture_ + comp], log_scale_limit_);
    out[t] = means[t * mixture_ + comp] + std::exp(log_scale) * rng.normal();
  }
  return out;
}

}  // namespace flowscan
