#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "flowscan/oracle.hpp"
#include "flowscan/rng.hpp"

using namespace flowscan;

namespace {

double log_normal(double v, double mean, double sd) {
  const double z = (v - mean) / sd;
  return -0.5 * std::log(2.0 * std::acos(-1.0)) - std::log(sd) - 0.5 * z * z;
}

double iid_normal_logp(const Tensor& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += log_normal(x[i], 0.0, 1.0);
  return acc;
}

}  // namespace

TEST_CASE("permutation average of a single point is the density itself") {
  Tensor x({1, 2}, {0.3, -0.8});
  const double direct = iid_normal_logp(x);
  CHECK(oracle::perm_avg_log_prob(iid_normal_logp, x) == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("permutation average of an exchangeable density is a no-op") {
  Rng rng(1);
  Tensor x({4, 2});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.normal();
  const double direct = iid_normal_logp(x);
  const double averaged = oracle::perm_avg_log_prob(iid_normal_logp, x);
  CHECK(std::fabs(averaged - direct) < 1e-12);
}

TEST_CASE("permutation average matches an independently coded enumeration") {
  Rng rng(2);
  Tensor x({3, 2});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.normal() * 0.3;
  // Second implementation: explicit index triples, shifted-exponent mean.
  std::vector<double> terms;
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = 0; b < 3; ++b) {
      for (std::size_t c = 0; c < 3; ++c) {
        if (a == b || b == c || a == c) continue;
        Tensor reordered({3, 2});
        const std::size_t order[3] = {a, b, c};
        for (std::size_t i = 0; i < 3; ++i) {
          reordered[i * 2] = x[order[i] * 2];
          reordered[i * 2 + 1] = x[order[i] * 2 + 1];
        }
        terms.push_back(oracle::sinusoid_log_density(reordered));
      }
    }
  }
  const double shift = *std::max_element(terms.begin(), terms.end());
  double mean = 0.0;
  for (double t : terms) mean += std::exp(t - shift);
  mean /= static_cast<double>(terms.size());
  const double expected = shift + std::log(mean);

  const auto density = [](const Tensor& m) { return oracle::sinusoid_log_density(m); };
  CHECK(oracle::perm_avg_log_prob(density, x) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("permutation average refuses intractable cardinalities") {
  Tensor x({10, 1});
  CHECK_THROWS_AS(oracle::perm_avg_log_prob(iid_normal_logp, x), TractabilityError);
}

TEST_CASE("sinusoid ground truth lands in the published band") {
  SetDataset data = gen_sinusoid(60, 8, 2024);
  const std::vector<double> ppll = oracle::ground_truth_sinusoid_ppll(data);
  const double mean = std::accumulate(ppll.begin(), ppll.end(), 0.0) / ppll.size();
  CHECK(mean >= 0.0);
  CHECK(mean <= 0.5);
}

TEST_CASE("sinusoid ground truth is permutation invariant by construction") {
  SetDataset data = gen_sinusoid(1, 4, 5);
  const Tensor& set = data.sets[0];
  const auto density = [](const Tensor& m) { return oracle::sinusoid_log_density(m); };
  const double base = oracle::perm_avg_log_prob(density, set);
  std::vector<std::size_t> order{0, 1, 2, 3};
  do {
    Tensor reordered({4, 2});
    for (std::size_t i = 0; i < 4; ++i) {
      reordered[i * 2] = set[order[i] * 2];
      reordered[i * 2 + 1] = set[order[i] * 2 + 1];
    }
    CHECK(std::fabs(oracle::perm_avg_log_prob(density, reordered) - base) < 1e-10);
  } while (std::next_permutation(order.begin(), order.end()));
}

TEST_CASE("ground truth rises as generator noise shrinks") {
  double previous = -1e300;
  for (double scale : {0.2, 0.1, 0.05}) {
    SetDataset data = gen_sinusoid(30, 4, 99, scale);
    const std::vector<double> ppll = oracle::ground_truth_sinusoid_ppll(data, scale);
    const double mean = std::accumulate(ppll.begin(), ppll.end(), 0.0) / ppll.size();
    CHECK(mean > previous);
    previous = mean;
  }
}

TEST_CASE("grid quadrature reproduces known integrals") {
  const auto std_normal = [](const std::vector<double>& p) {
    return log_normal(p[0], 0.0, 1.0);
  };
  oracle::GridBox box{{-8.0}, {8.0}};
  CHECK(oracle::grid_normalization(std_normal, box, 10000) == doctest::Approx(1.0).epsilon(1e-6));

  const auto doubled = [](const std::vector<double>& p) {
    return std::log(2.0) + log_normal(p[0], 0.0, 1.0);
  };
  CHECK(oracle::grid_normalization(doubled, box, 10000) == doctest::Approx(2.0).epsilon(1e-6));

  // 2-d product of standard normals.
  const auto normal_2d = [](const std::vector<double>& p) {
    return log_normal(p[0], 0.0, 1.0) + log_normal(p[1], 0.0, 1.0);
  };
  oracle::GridBox box2{{-7.0, -7.0}, {7.0, 7.0}};
  CHECK(oracle::grid_normalization(normal_2d, box2, 600) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("grid quadrature refuses oversized grids") {
  const auto zero = [](const std::vector<double>&) { return 0.0; };
  oracle::GridBox box{{-1.0, -1.0, -1.0}, {1.0, 1.0, 1.0}};
  CHECK_THROWS_AS(oracle::grid_normalization(zero, box, 500), ConfigError);
}

TEST_CASE("finite-difference Jacobian log-determinants") {
  const auto identity = [](const Tensor& x) { return x; };
  Tensor x({3}, {0.2, -0.5, 1.0});
  CHECK(std::fabs(oracle::fd_jacobian_logdet(identity, x)) < 1e-8);

  // Fixed linear map with determinant 6.
  const auto linear = [](const Tensor& v) {
    Tensor out({2});
    out[0] = 2.0 * v[0] + 1.0 * v[1];
    out[1] = 3.0 * v[1];
    return out;
  };
  Tensor x2({2}, {0.4, 0.7});
  CHECK(oracle::fd_jacobian_logdet(linear, x2) == doctest::Approx(std::log(6.0)).epsilon(1e-6));
}

TEST_CASE("scale plus mean map matches its closed-form determinant") {
  // y_i = 2 x_i + (1/3) sum x: log|det| = 2 log 2 + log 3 at n = 3.
  const auto map = [](const Tensor& v) {
    const double total = v[0] + v[1] + v[2];
    Tensor out({3});
    for (std::size_t i = 0; i < 3; ++i) out[i] = 2.0 * v[i] + total / 3.0;
    return out;
  };
  Tensor x({3}, {0.1, -0.7, 0.4});
  const double expected = 2.0 * std::log(2.0) + std::log(3.0);
  const double got = oracle::fd_jacobian_logdet(map, x);
  CHECK(std::fabs(got - expected) / expected < 1e-4);
}

TEST_CASE("singular maps are reported, not silently logged") {
  // lambda = 1, gamma = -1 collapses the mean direction.
  const auto centered = [](const Tensor& v) {
    const double mean = (v[0] + v[1] + v[2]) / 3.0;
    Tensor out({3});
    for (std::size_t i = 0; i < 3; ++i) out[i] = v[i] - mean;
    return out;
  };
  Tensor x({3}, {0.3, 0.9, -0.2});
  CHECK_THROWS_AS(oracle::fd_jacobian_logdet(centered, x), NumericError);
}

TEST_CASE("finite-difference Jacobian respects the size cap") {
  const auto identity = [](const Tensor& x) { return x; };
  Tensor big({65});
  CHECK_THROWS_AS(oracle::fd_jacobian_logdet(identity, big), TractabilityError);
}

TEST_CASE("finite-difference parameter gradients match a hand derivative") {
  ParamStore store;
  auto w = store.param("w", Tensor({2}, {0.5, -1.0}));
  auto b = store.param("b", Tensor::scalar(0.3));
  // loss = (w0 + 2 w1 + b)^2
  const auto loss = [&]() {
    const double v = w->value[0] + 2.0 * w->value[1] + b->value.item();
    return v * v;
  };
  const auto grads = oracle::fd_gradient(loss, store);
  const double inner = 0.5 - 2.0 + 0.3;
  CHECK(grads.at("w")[0] == doctest::Approx(2.0 * inner).epsilon(1e-6));
  CHECK(grads.at("w")[1] == doctest::Approx(4.0 * inner).epsilon(1e-6));
  CHECK(grads.at("b").item() == doctest::Approx(2.0 * inner).epsilon(1e-6));
}
