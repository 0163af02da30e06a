#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "flowscan/oracle.hpp"
#include "flowscan/transforms.hpp"

using namespace flowscan;
using autodiff::Var;

namespace {

Tensor random_batch(Rng& rng, std::size_t B, std::size_t n, std::size_t d, double scale = 1.0) {
  Tensor t({B, n, d});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

Tensor permute_rows(const Tensor& batch, const std::vector<std::size_t>& perm) {
  const std::size_t B = batch.extent(0);
  const std::size_t n = batch.extent(1);
  const std::size_t d = batch.extent(2);
  Tensor out({B, n, d});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < d; ++k) {
        out[(b * n + j) * d + k] = batch[(b * n + perm[j]) * d + k];
      }
    }
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

// max |T(Gx) - G T(x)| plus the logdet gap, over random permutations.
void check_equivariance(const Transform& t, const Tensor& batch, Rng& rng, int trials = 20,
                        double tol = 1e-9) {
  TransformResult base = apply(t, SetBatch(batch), Direction::Forward);
  for (int trial = 0; trial < trials; ++trial) {
    const auto perm = rng.permutation(batch.extent(1));
    TransformResult permuted = apply(t, SetBatch(permute_rows(batch, perm)), Direction::Forward);
    CHECK(max_abs_diff(permuted.output.values, permute_rows(base.output.values, perm)) < tol);
    CHECK(max_abs_diff(permuted.logdet, base.logdet) < tol);
  }
}

void check_round_trip(const Transform& t, const Tensor& batch, double tol) {
  TransformResult fwd = apply(t, SetBatch(batch), Direction::Forward);
  TransformResult back = apply(t, fwd.output, Direction::Inverse);
  CHECK(max_abs_diff(back.output.values, batch) < tol);
  // Log determinants of the two directions cancel.
  for (std::size_t b = 0; b < batch.extent(0); ++b) {
    CHECK(std::fabs(fwd.logdet[b] + back.logdet[b]) < tol);
  }
}

// Compares the reported logdet at a single set against the dense
// finite-difference Jacobian.
void check_fd_logdet(const Transform& t, const Tensor& set_values, double rel_tol = 1e-4) {
  const std::size_t n = set_values.extent(0);
  const std::size_t d = set_values.extent(1);
  Tensor batch = set_values.reshaped({1, n, d});
  TransformResult fwd = apply(t, SetBatch(batch), Direction::Forward);
  const double analytic = fwd.logdet[0];
  const double numeric = oracle::fd_jacobian_logdet(
      [&](const Tensor& probe) {
        autodiff::NoGradGuard guard;
        Var x = autodiff::constant(probe.reshaped({1, n, d}));
        return t.forward(x).output->value;
      },
      set_values);
  const double scale = std::max({1e-8, std::fabs(analytic), std::fabs(numeric)});
  CHECK(std::fabs(analytic - numeric) / scale < rel_tol);
}

}  // namespace

TEST_CASE("soft clamp is bounded and near identity in the core") {
  Var v = autodiff::leaf(Tensor({3}, {0.1, 10.0, -50.0}));
  Var c = soft_clamp(v, 4.0);
  CHECK(std::fabs(c->value[0] - 0.1) < 1e-3);
  CHECK(c->value[1] < 4.0);
  CHECK(c->value[2] > -4.0);
}

TEST_CASE("alternating masks partition the dimensions") {
  DimensionMask even = DimensionMask::alternating(3, 0);
  CHECK(even.transformed == std::vector<std::size_t>{0, 2});
  CHECK(even.conditioning == std::vector<std::size_t>{1});
  DimensionMask odd = DimensionMask::alternating(3, 1);
  CHECK(odd.transformed == std::vector<std::size_t>{1});
  CHECK(odd.conditioning == std::vector<std::size_t>{0, 2});
  even.validate(3);
  DimensionMask broken;
  broken.transformed = {0, 0};
  broken.conditioning = {1};
  CHECK_THROWS_AS(broken.validate(2), ConfigError);
}

TEST_CASE("coupling with fresh parameters is the identity") {
  ParamStore store;
  Rng rng(1);
  PointwiseCoupling t(store, rng, "pc", 2, DimensionMask::alternating(2, 1));
  Tensor batch = random_batch(rng, 3, 4, 2);
  TransformResult r = apply(t, SetBatch(batch), Direction::Forward);
  CHECK(max_abs_diff(r.output.values, batch) == 0.0);
  for (std::size_t b = 0; b < 3; ++b) CHECK(r.logdet[b] == 0.0);
}

TEST_CASE("coupling reproduces a hand-evaluated scale and shift") {
  ParamStore store;
  Rng rng(2);
  // Transform the second coordinate conditioned on the first.
  PointwiseCoupling t(store, rng, "pc", 2, DimensionMask::alternating(2, 1));
  // The head layer starts at zero, so its bias sets constant f and g. The
  // scale passes through the smooth clamp; pre-distort so f = log 2 exactly.
  Tensor& head_bias = store.get("pc.net.b2")->value;
  head_bias[0] = 4.0 * std::atanh(std::log(2.0) / 4.0);
  head_bias[1] = 1.0;
  Tensor batch({1, 1, 2}, {3.0, 5.0});
  TransformResult r = apply(t, SetBatch(batch), Direction::Forward);
  CHECK(r.output.values[0] == doctest::Approx(3.0));
  CHECK(r.output.values[1] == doctest::Approx(11.0));
  CHECK(r.logdet[0] == doctest::Approx(std::log(2.0)));
}

TEST_CASE("coupling round trip and Jacobian with random parameters") {
  ParamStore store;
  Rng rng(3);
  PointwiseCoupling t(store, rng, "pc", 2, DimensionMask::alternating(2, 0));
  store.randomize_uniform(rng, 0.5);
  check_round_trip(t, random_batch(rng, 4, 3, 2), 1e-9);
  for (int i = 0; i < 3; ++i) {
    Tensor set({3, 2});
    for (std::size_t k = 0; k < set.numel(); ++k) set[k] = rng.normal();
    check_fd_logdet(t, set);
  }
  check_equivariance(t, random_batch(rng, 2, 5, 2), rng);
}

TEST_CASE("coupling rejects masks without conditioning dimensions") {
  ParamStore store;
  Rng rng(4);
  DimensionMask all;
  all.transformed = {0};
  CHECK_THROWS_AS(PointwiseCoupling(store, rng, "pc", 1, all), ConfigError);
}

TEST_CASE("leaky rectifier flow hand case and round trip") {
  LeakyReluFlow t(0.5);
  Tensor batch({1, 1, 2}, {1.0, -2.0});
  TransformResult r = apply(t, SetBatch(batch), Direction::Forward);
  CHECK(r.output.values[0] == doctest::Approx(1.0));
  CHECK(r.output.values[1] == doctest::Approx(-1.0));
  CHECK(r.logdet[0] == doctest::Approx(std::log(0.5)));

  Tensor positive({1, 2, 2}, {0.5, 1.0, 2.0, 3.0});
  TransformResult rp = apply(t, SetBatch(positive), Direction::Forward);
  CHECK(max_abs_diff(rp.output.values, positive) == 0.0);
  CHECK(rp.logdet[0] == 0.0);

  Rng rng(5);
  check_round_trip(t, random_batch(rng, 3, 4, 2), 1e-12);
  check_equivariance(t, random_batch(rng, 2, 6, 3), rng);
  for (int i = 0; i < 3; ++i) {
    Tensor set({4, 2});
    for (std::size_t k = 0; k < set.numel(); ++k) set[k] = rng.normal() + 0.3;
    check_fd_logdet(t, set);
  }
  CHECK_THROWS_AS(LeakyReluFlow(-0.1), ConfigError);
}

TEST_CASE("scale plus mean map: identity at init, known determinant, inverse") {
  {
    ParamStore store;
    EquivariantLinear t(store, "eq", 2);
    Rng rng(6);
    Tensor batch = random_batch(rng, 2, 3, 2);
    TransformResult r = apply(t, SetBatch(batch), Direction::Forward);
    CHECK(max_abs_diff(r.output.values, batch) < 1e-15);
    CHECK(std::fabs(r.logdet[0]) < 1e-15);
  }
  {
    ParamStore store;
    auto t = EquivariantLinear::from_raw(store, "eq", {2.0}, {1.0});
    Tensor batch({1, 3, 1}, {0.4, -1.0, 2.2});
    TransformResult r = apply(*t, SetBatch(batch), Direction::Forward);
    const double expected = 2.0 * std::log(2.0) + std::log(3.0);
    CHECK(r.logdet[0] == doctest::Approx(expected).epsilon(1e-12));
    // Forward matches the explicit per-point formula.
    const double mean = (0.4 - 1.0 + 2.2) / 3.0;
    CHECK(r.output.values[0] == doctest::Approx(2.0 * 0.4 + mean));
    check_fd_logdet(*t, batch.reshaped({3, 1}));
    Rng rng(7);
    check_round_trip(*t, random_batch(rng, 3, 3, 1), 1e-9);
    check_equivariance(*t, random_batch(rng, 2, 5, 1), rng);
  }
  {
    ParamStore store;
    CHECK_THROWS_AS(EquivariantLinear::from_raw(store, "bad", {2.0}, {-2.0}), ConfigError);
    CHECK_THROWS_AS(EquivariantLinear::from_raw(store, "bad2", {-1.0}, {0.5}), ConfigError);
  }
}

TEST_CASE("scale plus mean map with random parameters") {
  ParamStore store;
  EquivariantLinear t(store, "eq", 3);
  Rng rng(8);
  store.randomize_uniform(rng, 0.7);
  check_round_trip(t, random_batch(rng, 4, 4, 3), 1e-9);
  for (int i = 0; i < 3; ++i) {
    Tensor set({3, 3});
    for (std::size_t k = 0; k < set.numel(); ++k) set[k] = rng.normal();
    check_fd_logdet(t, set);
  }
}

TEST_CASE("softmax-mean map reduces to the plain mean at zero temperature") {
  ParamStore lin_store;
  ParamStore soft_store;
  EquivariantLinear lin(lin_store, "eq", 2);
  EquivariantSoftmaxMean soft(soft_store, "sm", 2);
  Rng rng(9);
  Tensor ab({2}, {0.3, -0.2});
  lin_store.get("eq.a")->value = ab;
  soft_store.get("sm.a")->value = ab;
  Tensor bs({2}, {0.5, 0.1});
  lin_store.get("eq.b")->value = bs;
  soft_store.get("sm.b")->value = bs;
  Tensor batch = random_batch(rng, 3, 4, 2);
  TransformResult rl = apply(lin, SetBatch(batch), Direction::Forward);
  TransformResult rs = apply(soft, SetBatch(batch), Direction::Forward);
  CHECK(max_abs_diff(rl.output.values, rs.output.values) < 1e-12);
  CHECK(max_abs_diff(rl.logdet, rs.logdet) < 1e-12);
}

TEST_CASE("softmax-mean map saturates to a shift by the maximum") {
  ParamStore store;
  EquivariantSoftmaxMean t(store, "sm", 1);
  store.get("sm.beta")->value[0] = 50.0;
  // a = 0, b = log 2 gives lambda = 1, gamma = 1.
  store.get("sm.b")->value[0] = std::log(2.0);
  Tensor batch({1, 3, 1}, {0.0, 1.0, 2.0});
  TransformResult r = apply(t, SetBatch(batch), Direction::Forward);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(std::fabs(r.output.values[i] - (batch[i] + 2.0)) < 1e-3);
  }
}

TEST_CASE("softmax-mean map round trip, Jacobian, equivariance") {
  ParamStore store;
  EquivariantSoftmaxMean t(store, "sm", 2);
  Rng rng(10);
  store.randomize_uniform(rng, 0.8);
  check_round_trip(t, random_batch(rng, 4, 4, 2), 1e-8);
  for (int i = 0; i < 3; ++i) {
    Tensor set({4, 2});
    for (std::size_t k = 0; k < set.numel(); ++k) set[k] = rng.normal();
    check_fd_logdet(t, set);
  }
  check_equivariance(t, random_batch(rng, 2, 5, 2), rng);
}

TEST_CASE("set embedding is order and duplication invariant") {
  ParamStore store;
  Rng rng(11);
  SetEmbedding embed(store, rng, "phi", 2, 16, 8);
  store.randomize_uniform(rng, 0.5);
  Tensor batch = random_batch(rng, 2, 5, 2);

  autodiff::NoGradGuard guard;
  Tensor base = embed(autodiff::constant(batch))->value;
  for (int trial = 0; trial < 10; ++trial) {
    const auto perm = rng.permutation(5);
    Tensor permuted = embed(autodiff::constant(permute_rows(batch, perm)))->value;
    CHECK(max_abs_diff(permuted, base) < 1e-10);
  }

  // Duplicating every point leaves the mean pool unchanged.
  Tensor doubled({2, 10, 2});
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t j = 0; j < 10; ++j) {
      for (std::size_t k = 0; k < 2; ++k) {
        doubled[(b * 10 + j) * 2 + k] = batch[(b * 5 + j % 5) * 2 + k];
      }
    }
  }
  CHECK(max_abs_diff(embed(autodiff::constant(doubled))->value, base) < 1e-12);

  // A single point pools to its own features.
  Tensor one = random_batch(rng, 1, 1, 2);
  Tensor two({1, 2, 2}, {one[0], one[1], one[0], one[1]});
  CHECK(max_abs_diff(embed(autodiff::constant(one))->value,
                     embed(autodiff::constant(two))->value) < 1e-12);
}

TEST_CASE("set coupling: identity at init, equivariance, Jacobian, round trip") {
  ParamStore store;
  Rng rng(12);
  DimensionMask mask;
  mask.transformed = {0, 2};
  mask.conditioning = {1};
  SetCoupling t(store, rng, "sc", 3, mask, 24, 8);
  Tensor batch = random_batch(rng, 2, 4, 3);
  TransformResult identity = apply(t, SetBatch(batch), Direction::Forward);
  CHECK(max_abs_diff(identity.output.values, batch) == 0.0);

  store.randomize_uniform(rng, 0.4);
  check_equivariance(t, random_batch(rng, 2, 5, 3), rng, 20, 1e-9);
  check_round_trip(t, random_batch(rng, 3, 4, 3), 1e-8);
  for (int i = 0; i < 3; ++i) {
    Tensor set({4, 3});
    for (std::size_t k = 0; k < set.numel(); ++k) set[k] = rng.normal();
    check_fd_logdet(t, set);
  }
}

TEST_CASE("composition sums log determinants and inverts in reverse") {
  ParamStore store;
  Rng rng(13);
  auto stack = std::make_shared<Compose>();
  stack->push_back(EquivariantLinear::from_raw(store, "eq", {1.5, 0.8}, {0.3, 0.2}));
  stack->push_back(std::make_shared<LeakyReluFlow>(0.6));
  Tensor batch = random_batch(rng, 2, 3, 2);

  TransformResult whole = apply(*stack, SetBatch(batch), Direction::Forward);
  TransformResult first = apply(*EquivariantLinear::from_raw(store, "eq2", {1.5, 0.8}, {0.3, 0.2}),
                                SetBatch(batch), Direction::Forward);
  LeakyReluFlow leaky(0.6);
  TransformResult second = apply(leaky, first.output, Direction::Forward);
  CHECK(max_abs_diff(whole.output.values, second.output.values) < 1e-12);
  for (std::size_t b = 0; b < 2; ++b) {
    CHECK(whole.logdet[b] == doctest::Approx(first.logdet[b] + second.logdet[b]));
  }
  check_round_trip(*stack, batch, 1e-9);
}

TEST_CASE("empty composition is the identity") {
  Compose stack;
  Rng rng(14);
  Tensor batch = random_batch(rng, 2, 3, 2);
  TransformResult r = apply(stack, SetBatch(batch), Direction::Forward);
  CHECK(max_abs_diff(r.output.values, batch) == 0.0);
  CHECK(r.logdet[0] == 0.0);
  CHECK(r.logdet[1] == 0.0);
}

TEST_CASE("six layer stack round trips") {
  ParamStore store;
  Rng rng(15);
  auto stack = std::make_shared<Compose>();
  stack->push_back(std::make_shared<EquivariantLinear>(store, "l0", 2));
  stack->push_back(std::make_shared<PointwiseCoupling>(store, rng, "l1", 2,
                                                       DimensionMask::alternating(2, 0), 16));
  stack->push_back(std::make_shared<LeakyReluFlow>(0.7));
  stack->push_back(std::make_shared<SetCoupling>(store, rng, "l3", 2,
                                                 DimensionMask::alternating(2, 1), 16, 8));
  stack->push_back(std::make_shared<EquivariantSoftmaxMean>(store, "l4", 2));
  stack->push_back(std::make_shared<PointwiseCoupling>(store, rng, "l5", 2,
                                                       DimensionMask::alternating(2, 1), 16));
  for (int trial = 0; trial < 10; ++trial) {
    store.randomize_uniform(rng, 0.4);
    check_round_trip(*stack, random_batch(rng, 2, 4, 2), 1e-8);
  }
  store.randomize_uniform(rng, 0.4);
  check_equivariance(*stack, random_batch(rng, 2, 5, 2), rng, 20, 1e-9);
}

TEST_CASE("composition reports the failing layer") {
  ParamStore store;
  Rng rng(16);
  Compose stack;
  stack.push_back(std::make_shared<PointwiseCoupling>(store, rng, "l0", 3,
                                                      DimensionMask::alternating(3, 0), 8));
  Tensor wrong_d = random_batch(rng, 1, 2, 2);
  try {
    apply(stack, SetBatch(wrong_d), Direction::Forward);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("stack[0]") != std::string::npos);
  }
}

TEST_CASE("logdet fault injection hook shifts the reported value") {
  ParamStore store;
  auto t = EquivariantLinear::from_raw(store, "eq", {2.0}, {1.0});
  Tensor batch({1, 3, 1}, {0.1, 0.5, -0.2});
  TransformResult clean = apply(*t, SetBatch(batch), Direction::Forward);
  testing::eq_linear_logdet_offset = 0.1;
  TransformResult biased = apply(*t, SetBatch(batch), Direction::Forward);
  testing::eq_linear_logdet_offset = 0.0;
  CHECK(biased.logdet[0] - clean.logdet[0] == doctest::Approx(0.1));
}
