#include "flowscan/scan.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flowscan/errors.hpp"

namespace flowscan {

namespace ad = autodiff;

namespace {

void expect_batch(const ad::Var& v, std::size_t d, const char* who) {
  if (v->value.rank() != 3) {
    throw ShapeError(std::string(who) + " expects a batch x n x d tensor, got " +
                     shape_to_string(v->value.shape()));
  }
  if (d != 0 && v->value.extent(2) != d) {
    throw ShapeError(std::string(who) + " was built for d=" + std::to_string(d) + ", got " +
                     shape_to_string(v->value.shape()));
  }
}

}  // namespace

double factorial_correction(std::size_t n) {
  if (n < 1) throw ConfigError("factorial correction needs n >= 1");
  long double acc = 0.0L;
  for (std::size_t k = 2; k <= n; ++k) {
    acc += std::log(static_cast<long double>(k));
  }
  return static_cast<double>(-acc);
}

ScanResult sort_scan(const ad::Var& x, std::size_t key_dimension) {
  expect_batch(x, 0, "sort_scan");
  const std::size_t batch = x->value.extent(0);
  const std::size_t n = x->value.extent(1);
  const std::size_t d = x->value.extent(2);
  if (key_dimension < 1 || key_dimension > d) {
    throw ConfigError("sort key dimension " + std::to_string(key_dimension) +
                      " is out of range for d=" + std::to_string(d));
  }
  const std::size_t key = key_dimension - 1;

  std::vector<std::size_t> perm(batch * n);
  std::vector<std::size_t> order(n);
  const double* data = x->value.data();
  for (std::size_t b = 0; b < batch; ++b) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const double* set = data + b * n * d;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
      return set[i * d + key] < set[j * d + key];
    });
    std::copy(order.begin(), order.end(), perm.begin() + b * n);
  }

  ScanResult result;
  result.permutation = perm;
  result.sorted = ad::batch_gather_rows(x, std::move(perm));
  result.correction = factorial_correction(n);
  return result;
}

CorrespondenceCoupling::CorrespondenceCoupling(ParamStore& store, Rng& rng,
                                               const std::string& prefix, std::size_t dim,
                                               PairParity parity, std::size_t hidden)
    : dim_(dim), parity_(parity) {
  if (dim == 0) throw ConfigError("correspondence coupling needs d >= 1");
  net_ = Mlp(store, rng, prefix + ".net", dim, hidden, 2 * dim);
}

FlowResult CorrespondenceCoupling::forward(const ad::Var& x) const { return apply(x, false); }

FlowResult CorrespondenceCoupling::inverse(const ad::Var& z) const { return apply(z, true); }

FlowResult CorrespondenceCoupling::apply(const ad::Var& x, bool inverse_mode) const {
  expect_batch(x, dim_, "correspondence coupling");
  const std::size_t batch = x->value.extent(0);
  const std::size_t n = x->value.extent(1);
  if (n < 2) throw ShapeError("correspondence coupling needs at least two points per set");
  const std::size_t pairs = n / 2;

  std::vector<std::size_t> even_rows(pairs), odd_rows(pairs);
  for (std::size_t j = 0; j < pairs; ++j) {
    even_rows[j] = 2 * j;
    odd_rows[j] = 2 * j + 1;
  }
  const bool even_target = parity_ == PairParity::EvenFromOdd;
  const std::vector<std::size_t>& target_rows = even_target ? even_rows : odd_rows;
  const std::vector<std::size_t>& source_rows = even_target ? odd_rows : even_rows;

  ad::Var source = ad::index_select(x, 1, source_rows);  // B x pairs x d
  ad::Var target = ad::index_select(x, 1, target_rows);

  ad::Var heads = net_(ad::reshape(source, {batch * pairs, dim_}));
  ad::Var f = soft_clamp(ad::slice(heads, 1, 0, dim_), 4.0);
  ad::Var m = ad::slice(heads, 1, dim_, dim_);

  ad::Var target_flat = ad::reshape(target, {batch * pairs, dim_});
  ad::Var moved = inverse_mode ? ad::mul(ad::sub(target_flat, m), ad::exp(ad::neg(f)))
                               : ad::add(ad::mul(target_flat, ad::exp(f)), m);

  ad::Var out = ad::add(ad::index_scatter(ad::reshape(moved, {batch, pairs, dim_}), 1, target_rows, n),
                        ad::index_scatter(source, 1, source_rows, n));
  if (n % 2 == 1) {
    out = ad::add(out, ad::index_scatter(ad::slice(x, 1, n - 1, 1), 1, {n - 1}, n));
  }

  ad::Var logdet = ad::sum(ad::sum(ad::reshape(f, {batch, pairs, dim_}), 2), 1);
  if (inverse_mode) logdet = ad::neg(logdet);
  return {out, logdet};
}

RecurrentCoupling::RecurrentCoupling(ParamStore& store, Rng& rng, const std::string& prefix,
                                     std::size_t dim, std::size_t hidden, std::size_t layers)
    : dim_(dim),
      rec_(store, rng, prefix + ".rec", dim, hidden, layers),
      head_(store, rng, prefix + ".head", hidden, hidden, 2 * dim, 1) {
  if (dim == 0) throw ConfigError("recurrent coupling needs d >= 1");
}

FlowResult RecurrentCoupling::forward(const ad::Var& x) const {
  expect_batch(x, dim_, "recurrent coupling");
  const std::size_t batch = x->value.extent(0);
  const std::size_t n = x->value.extent(1);

  std::vector<ad::Var> parts;
  parts.reserve(n);
  parts.push_back(ad::slice(x, 1, 0, 1));
  ad::Var logdet = ad::constant(Tensor({batch}));
  std::vector<ad::Var> state = rec_.initial_state(batch);
  for (std::size_t i = 1; i < n; ++i) {
    ad::Var previous = ad::reshape(ad::slice(x, 1, i - 1, 1), {batch, dim_});
    state = rec_.advance(state, previous);
    ad::Var heads = head_(state.back());
    ad::Var f = soft_clamp(ad::slice(heads, 1, 0, dim_), 4.0);
    ad::Var m = ad::slice(heads, 1, dim_, dim_);
    ad::Var zi = ad::reshape(ad::slice(x, 1, i, 1), {batch, dim_});
    ad::Var yi = ad::add(ad::mul(zi, ad::exp(f)), m);
    parts.push_back(ad::reshape(yi, {batch, std::size_t{1}, dim_}));
    logdet = ad::add(logdet, ad::sum(f, 1));
  }
  return {n == 1 ? parts[0] : ad::concat(parts, 1), logdet};
}

FlowResult RecurrentCoupling::inverse(const ad::Var& z) const {
  expect_batch(z, dim_, "recurrent coupling");
  const std::size_t batch = z->value.extent(0);
  const std::size_t n = z->value.extent(1);

  std::vector<ad::Var> parts;
  parts.reserve(n);
  parts.push_back(ad::slice(z, 1, 0, 1));
  ad::Var logdet = ad::constant(Tensor({batch}));
  std::vector<ad::Var> state = rec_.initial_state(batch);
  for (std::size_t i = 1; i < n; ++i) {
    ad::Var previous = ad::reshape(parts[i - 1], {batch, dim_});
    state = rec_.advance(state, previous);
    ad::Var heads = head_(state.back());
    ad::Var f = soft_clamp(ad::slice(heads, 1, 0, dim_), 4.0);
    ad::Var m = ad::slice(heads, 1, dim_, dim_);
    ad::Var zi = ad::reshape(ad::slice(z, 1, i, 1), {batch, dim_});
    ad::Var xi = ad::mul(ad::sub(zi, m), ad::exp(ad::neg(f)));
    parts.push_back(ad::reshape(xi, {batch, std::size_t{1}, dim_}));
    logdet = ad::sub(logdet, ad::sum(f, 1));
  }
  return {n == 1 ? parts[0] : ad::concat(parts, 1), logdet};
}

}  // namespace flowscan
