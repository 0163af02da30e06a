#include "flowscan/transforms.hpp"

#include <cmath>
#include <utility>

#include "flowscan/errors.hpp"

namespace flowscan {

using autodiff::Var;

namespace testing {
double eq_linear_logdet_offset = 0.0;
}

namespace {

void expect_batch(const Tensor& v, std::size_t d, const std::string& who) {
  if (v.rank() != 3) {
    throw ShapeError(who + ": expected B x n x d input, got " + v.shape_str());
  }
  if (d != 0 && v.extent(2) != d) {
    throw ShapeError(who + ": expected point dimension " + std::to_string(d) + ", got " +
                     std::to_string(v.extent(2)));
  }
}

// Per-set logdet as a B-vector sharing one scalar value.
Var spread_scalar(const Var& scalar, std::size_t batch) {
  return autodiff::mul(autodiff::constant(Tensor::full({batch}, 1.0)), scalar);
}

template <class F>
auto layer_context(std::size_t index, const std::string& layer_name, F&& f) {
  const std::string tag = "stack[" + std::to_string(index) + "] " + layer_name + ": ";
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError(tag + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(tag + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(tag + e.what());
  }
}

}  // namespace

Var soft_clamp(const Var& v, double limit) {
  return autodiff::mul(autodiff::tanh(autodiff::div(v, limit)), limit);
}

FlowResult apply(const Transform& t, const Var& x, Direction direction) {
  return direction == Direction::Forward ? t.forward(x) : t.inverse(x);
}

TransformResult apply(const Transform& t, const SetBatch& x, Direction direction) {
  autodiff::NoGradGuard guard;
  FlowResult r = apply(t, autodiff::constant(x.values), direction);
  return TransformResult{SetBatch(r.output->value), r.logdet->value};
}

// --- Mlp ----------------------------------------------------------------------

Mlp::Mlp(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t in,
         std::size_t hidden, std::size_t out, std::size_t hidden_layers, bool zero_final) {
  std::vector<std::size_t> widths{in};
  for (std::size_t l = 0; l < hidden_layers; ++l) widths.push_back(hidden);
  widths.push_back(out);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t fan_in = widths[l];
    const std::size_t fan_out = widths[l + 1];
    Tensor w({fan_in, fan_out});
    const bool final_layer = l + 2 == widths.size();
    if (!final_layer || !zero_final) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (std::size_t i = 0; i < w.numel(); ++i) {
        w[i] = (2.0 * rng.uniform() - 1.0) * limit;
      }
    }
    const std::string tag = std::to_string(l);
    weights_.push_back(store.param(prefix + ".w" + tag, std::move(w)));
    biases_.push_back(store.param(prefix + ".b" + tag, Tensor({1, fan_out})));
  }
}

Var Mlp::operator()(const Var& x) const {
  if (weights_.empty()) throw ConfigError("perceptron used before construction");
  Var h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    h = autodiff::add(autodiff::matmul(h, weights_[l]), biases_[l]);
    if (l + 1 < weights_.size()) h = autodiff::tanh(h);
  }
  return h;
}

// --- DimensionMask --------------------------------------------------------------

DimensionMask DimensionMask::alternating(std::size_t d, std::size_t parity) {
  DimensionMask mask;
  for (std::size_t j = 0; j < d; ++j) {
    if (j % 2 == parity % 2) {
      mask.transformed.push_back(j);
    } else {
      mask.conditioning.push_back(j);
    }
  }
  return mask;
}

void DimensionMask::validate(std::size_t d) const {
  if (transformed.empty()) throw ConfigError("dimension mask transforms nothing");
  std::vector<bool> seen(d, false);
  auto mark = [&](const std::vector<std::size_t>& dims) {
    for (std::size_t j : dims) {
      if (j >= d) throw ConfigError("dimension mask index out of range");
      if (seen[j]) throw ConfigError("dimension mask repeats a coordinate");
      seen[j] = true;
    }
  };
  mark(transformed);
  mark(conditioning);
  if (transformed.size() + conditioning.size() != d) {
    throw ConfigError("dimension mask must cover every coordinate exactly once");
  }
}

// --- PointwiseCoupling -----------------------------------------------------------

PointwiseCoupling::PointwiseCoupling(ParamStore& store, Rng& rng, const std::string& prefix,
                                     std::size_t d, DimensionMask mask, std::size_t hidden)
    : d_(d), mask_(std::move(mask)) {
  mask_.validate(d_);
  if (mask_.conditioning.empty()) {
    throw ConfigError("coupling needs at least one conditioning dimension");
  }
  net_ = Mlp(store, rng, prefix + ".net", mask_.conditioning.size(), hidden,
             2 * mask_.transformed.size());
}

FlowResult PointwiseCoupling::affine(const Var& x, Direction direction) const {
  expect_batch(x->value, d_, name());
  const std::size_t B = x->value.extent(0);
  const std::size_t n = x->value.extent(1);
  const std::size_t s = mask_.transformed.size();
  const std::size_t c = mask_.conditioning.size();

  Var cond = autodiff::index_select(x, 2, mask_.conditioning);
  Var heads = net_(autodiff::reshape(cond, {B * n, c}));
  Var f = soft_clamp(autodiff::slice(heads, 1, 0, s), 4.0);
  Var g = autodiff::slice(heads, 1, s, s);
  Var xs = autodiff::reshape(autodiff::index_select(x, 2, mask_.transformed), {B * n, s});

  Var ys = direction == Direction::Forward
               ? autodiff::add(autodiff::mul(autodiff::exp(f), xs), g)
               : autodiff::mul(autodiff::sub(xs, g), autodiff::exp(autodiff::neg(f)));

  Var out = autodiff::add(
      autodiff::index_scatter(autodiff::reshape(ys, {B, n, s}), 2, mask_.transformed, d_),
      autodiff::index_scatter(cond, 2, mask_.conditioning, d_));
  Var logdet = autodiff::sum(autodiff::sum(autodiff::reshape(f, {B, n, s}), 2), 1);
  if (direction == Direction::Inverse) logdet = autodiff::neg(logdet);
  return {out, logdet};
}

FlowResult PointwiseCoupling::forward(const Var& x) const { return affine(x, Direction::Forward); }
FlowResult PointwiseCoupling::inverse(const Var& z) const { return affine(z, Direction::Inverse); }

// --- SetEmbedding ---------------------------------------------------------------

SetEmbedding::SetEmbedding(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t in,
                           std::size_t hidden, std::size_t out)
    : out_(out) {
  point_net_ = Mlp(store, rng, prefix + ".point", in, hidden, out, 2, false);
  post_net_ = Mlp(store, rng, prefix + ".post", out, hidden, out, 2, false);
}

Var SetEmbedding::operator()(const Var& x) const {
  expect_batch(x->value, 0, "set_embedding");
  const std::size_t B = x->value.extent(0);
  const std::size_t n = x->value.extent(1);
  const std::size_t c = x->value.extent(2);
  Var feats = point_net_(autodiff::reshape(x, {B * n, c}));
  Var pooled = autodiff::mean(autodiff::reshape(feats, {B, n, out_}), 1);
  return post_net_(pooled);
}

// --- SetCoupling ----------------------------------------------------------------

SetCoupling::SetCoupling(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t d,
                         DimensionMask mask, std::size_t hidden, std::size_t embed_dim)
    : d_(d), mask_(std::move(mask)) {
  mask_.validate(d_);
  if (mask_.conditioning.empty()) {
    throw ConfigError("set coupling needs at least one conditioning dimension");
  }
  embed_ = SetEmbedding(store, rng, prefix + ".embed", mask_.conditioning.size(), hidden,
                        embed_dim);
  net_ = Mlp(store, rng, prefix + ".net", embed_dim + mask_.conditioning.size(), hidden,
             2 * mask_.transformed.size());
}

FlowResult SetCoupling::affine(const Var& x, Direction direction) const {
  expect_batch(x->value, d_, name());
  const std::size_t B = x->value.extent(0);
  const std::size_t n = x->value.extent(1);
  const std::size_t s = mask_.transformed.size();
  const std::size_t c = mask_.conditioning.size();
  const std::size_t r = embed_.out_dim();

  Var cond = autodiff::index_select(x, 2, mask_.conditioning);
  Var phi = embed_(cond);
  Var phi_rows = autodiff::repeat(autodiff::reshape(phi, {B, 1, r}), 1, n);
  Var heads = net_(autodiff::reshape(autodiff::concat({phi_rows, cond}, 2), {B * n, r + c}));
  Var f = soft_clamp(autodiff::slice(heads, 1, 0, s), 4.0);
  Var g = autodiff::slice(heads, 1, s, s);
  Var xs = autodiff::reshape(autodiff::index_select(x, 2, mask_.transformed), {B * n, s});

  Var ys = direction == Direction::Forward
               ? autodiff::add(autodiff::mul(autodiff::exp(f), xs), g)
               : autodiff::mul(autodiff::sub(xs, g), autodiff::exp(autodiff::neg(f)));

  Var out = autodiff::add(
      autodiff::index_scatter(autodiff::reshape(ys, {B, n, s}), 2, mask_.transformed, d_),
      autodiff::index_scatter(cond, 2, mask_.conditioning, d_));
  Var logdet = autodiff::sum(autodiff::sum(autodiff::reshape(f, {B, n, s}), 2), 1);
  if (direction == Direction::Inverse) logdet = autodiff::neg(logdet);
  return {out, logdet};
}

FlowResult SetCoupling::forward(const Var& x) const { return affine(x, Direction::Forward); }
FlowResult SetCoupling::inverse(const Var& z) const { return affine(z, Direction::Inverse); }

// --- LeakyReluFlow --------------------------------------------------------------

LeakyReluFlow::LeakyReluFlow(double slope) : slope_(slope) {
  if (slope <= 0.0) throw ConfigError("leaky_relu flow needs a positive slope");
}

namespace {

Tensor negative_count_logdet(const Tensor& v, double log_slope) {
  const std::size_t B = v.extent(0);
  const std::size_t per_set = v.extent(1) * v.extent(2);
  Tensor logdet({B});
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t negatives = 0;
    for (std::size_t i = 0; i < per_set; ++i) {
      if (v[b * per_set + i] < 0.0) ++negatives;
    }
    logdet[b] = static_cast<double>(negatives) * log_slope;
  }
  return logdet;
}

}  // namespace

FlowResult LeakyReluFlow::forward(const Var& x) const {
  expect_batch(x->value, 0, name());
  Var out = autodiff::leaky_relu(x, slope_);
  return {out, autodiff::constant(negative_count_logdet(x->value, std::log(slope_)))};
}

FlowResult LeakyReluFlow::inverse(const Var& z) const {
  expect_batch(z->value, 0, name());
  Var out = autodiff::leaky_relu(z, 1.0 / slope_);
  return {out, autodiff::constant(negative_count_logdet(z->value, -std::log(slope_)))};
}

// --- EquivariantLinear ------------------------------------------------------------

EquivariantLinear::EquivariantLinear(ParamStore& store, const std::string& prefix, std::size_t d)
    : d_(d) {
  if (d < 1) throw ConfigError("eq_linear needs d >= 1");
  a_ = store.param(prefix + ".a", Tensor({d}));
  b_ = store.param(prefix + ".b", Tensor({d}));
}

std::shared_ptr<EquivariantLinear> EquivariantLinear::from_raw(ParamStore& store,
                                                               const std::string& prefix,
                                                               const std::vector<double>& lambda,
                                                               const std::vector<double>& gamma) {
  if (lambda.size() != gamma.size() || lambda.empty()) {
    throw ConfigError("eq_linear raw parameters need matching nonzero length");
  }
  auto t = std::make_shared<EquivariantLinear>(store, prefix, lambda.size());
  for (std::size_t j = 0; j < lambda.size(); ++j) {
    if (lambda[j] <= 0.0 || lambda[j] + gamma[j] <= 0.0) {
      throw ConfigError("eq_linear raw scales are degenerate or unrepresentable: need lambda > 0 "
                        "and lambda + gamma > 0");
    }
    t->a_->value[j] = std::log(lambda[j]);
    t->b_->value[j] = std::log(lambda[j] + gamma[j]);
  }
  return t;
}

FlowResult EquivariantLinear::forward(const Var& x) const {
  expect_batch(x->value, d_, name());
  const std::size_t B = x->value.extent(0);
  const std::size_t n = x->value.extent(1);
  Var lam = autodiff::exp(autodiff::reshape(a_, {1, 1, d_}));
  Var lpg = autodiff::exp(autodiff::reshape(b_, {1, 1, d_}));
  Var gam = autodiff::sub(lpg, lam);
  Var m = autodiff::mean(x, 1, true);
  Var out = autodiff::add(autodiff::mul(x, lam), autodiff::mul(m, gam));
  Var per_set = autodiff::add(autodiff::mul(autodiff::sum(a_), static_cast<double>(n - 1)),
                              autodiff::sum(b_));
  if (testing::eq_linear_logdet_offset != 0.0) {
    per_set = autodiff::add(per_set, testing::eq_linear_logdet_offset);
  }
  return {out, spread_scalar(per_set, B)};
}

FlowResult EquivariantLinear::inverse(const Var& z) const {
  expect_batch(z->value, d_, name());
  const std::size_t B = z->value.extent(0);
  const std::size_t n = z->value.extent(1);
  Var lam = autodiff::exp(autodiff::reshape(a_, {1, 1, d_}));
  Var lpg = autodiff::exp(autodiff::reshape(b_, {1, 1, d_}));
  Var gam = autodiff::sub(lpg, lam);
  Var mz = autodiff::mean(z, 1, true);
  Var coef = autodiff::div(gam, autodiff::mul(lam, lpg));
  Var out = autodiff::sub(autodiff::div(z, lam), autodiff::mul(mz, coef));
  Var per_set = autodiff::add(autodiff::mul(autodiff::sum(a_), static_cast<double>(n - 1)),
                              autodiff::sum(b_));
  if (testing::eq_linear_logdet_offset != 0.0) {
    per_set = autodiff::add(per_set, testing::eq_linear_logdet_offset);
  }
  return {out, autodiff::neg(spread_scalar(per_set, B))};
}

// --- EquivariantSoftmaxMean -------------------------------------------------------

EquivariantSoftmaxMean::EquivariantSoftmaxMean(ParamStore& store, const std::string& prefix,
                                               std::size_t d)
    : d_(d) {
  if (d < 1) throw ConfigError("eq_softmax needs d >= 1");
  a_ = store.param(prefix + ".a", Tensor({d}));
  b_ = store.param(prefix + ".b", Tensor({d}));
  beta_ = store.param(prefix + ".beta", Tensor({d}));
}

FlowResult EquivariantSoftmaxMean::forward(const Var& x) const {
  expect_batch(x->value, d_, name());
  const std::size_t B = x->value.extent(0);
  const std::size_t n = x->value.extent(1);
  Var lam = autodiff::exp(autodiff::reshape(a_, {1, 1, d_}));
  Var lpg = autodiff::exp(autodiff::reshape(b_, {1, 1, d_}));
  Var gam = autodiff::sub(lpg, lam);
  Var beta = autodiff::reshape(beta_, {1, 1, d_});
  Var w = autodiff::softmax(autodiff::mul(x, beta), 1);
  Var wm = autodiff::sum(autodiff::mul(w, x), 1, true);
  Var out = autodiff::add(autodiff::mul(x, lam), autodiff::mul(wm, gam));
  Var per_set = autodiff::add(autodiff::mul(autodiff::sum(a_), static_cast<double>(n - 1)),
                              autodiff::sum(b_));
  return {out, spread_scalar(per_set, B)};
}

FlowResult EquivariantSoftmaxMean::inverse(const Var& z) const {
  expect_batch(z->value, d_, name());
  const std::size_t B = z->value.extent(0);
  const std::size_t n = z->value.extent(1);
  Var lam = autodiff::exp(autodiff::reshape(a_, {1, 1, d_}));
  Var lpg = autodiff::exp(autodiff::reshape(b_, {1, 1, d_}));
  Var gam = autodiff::sub(lpg, lam);
  Var beta = autodiff::reshape(beta_, {1, 1, d_});
  // The softmax weights are recoverable from z alone: the weighted mean adds
  // the same shift to every point, and a shared shift cancels inside softmax,
  // so weights over beta * z / lambda equal the forward weights over beta * x.
  Var u = autodiff::softmax(autodiff::mul(autodiff::div(z, lam), beta), 1);
  Var eta = autodiff::div(autodiff::sum(autodiff::mul(u, z), 1, true), lpg);
  Var out = autodiff::div(autodiff::sub(z, autodiff::mul(eta, gam)), lam);
  Var per_set = autodiff::add(autodiff::mul(autodiff::sum(a_), static_cast<double>(n - 1)),
                              autodiff::sum(b_));
  return {out, autodiff::neg(spread_scalar(per_set, B))};
}

// --- Compose --------------------------------------------------------------------

Compose::Compose(std::vector<std::shared_ptr<Transform>> layers) : layers_(std::move(layers)) {}

void Compose::push_back(std::shared_ptr<Transform> layer) { layers_.push_back(std::move(layer)); }

FlowResult Compose::forward(const Var& x) const {
  expect_batch(x->value, 0, name());
  Var out = x;
  Var logdet = autodiff::constant(Tensor({x->value.extent(0)}));
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    FlowResult r = layer_context(i, layers_[i]->name(),
                                 [&] { return layers_[i]->forward(out); });
    out = r.output;
    logdet = autodiff::add(logdet, r.logdet);
  }
  return {out, logdet};
}

FlowResult Compose::inverse(const Var& z) const {
  expect_batch(z->value, 0, name());
  Var out = z;
  Var logdet = autodiff::constant(Tensor({z->value.extent(0)}));
  for (std::size_t i = layers_.size(); i-- > 0;) {
    FlowResult r = layer_context(i, layers_[i]->name(),
                                 [&] { return layers_[i]->inverse(out); });
    out = r.output;
    logdet = autodiff::add(logdet, r.logdet);
  }
  return {out, logdet};
}

}  // namespace flowscan
