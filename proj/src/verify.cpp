#include "flowscan/verify.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <unistd.h>

#include "flowscan/errors.hpp"
#include "flowscan/model.hpp"
#include "flowscan/oracle.hpp"
#include "flowscan/scan.hpp"
#include "flowscan/transforms.hpp"

namespace flowscan {
namespace verify {
namespace {

namespace ad = autodiff;
using ad::Var;

struct Outcome {
  bool ok = true;
  std::string detail;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

Tensor random_mat(Rng& rng, std::size_t n, std::size_t d, double scale = 1.0) {
  Tensor t({n, d});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

double analytic_logdet(const Transform& t, const Tensor& mat) {
  Var x = ad::constant(mat.reshaped({1, mat.extent(0), mat.extent(1)}));
  return t.forward(x).logdet->value[0];
}

double fd_logdet(const Transform& t, const Tensor& mat) {
  auto map = [&](const Tensor& m) {
    ad::NoGradGuard guard;
    Var x = ad::constant(m.reshaped({1, mat.extent(0), mat.extent(1)}));
    return t.forward(x).output->value.reshaped({mat.extent(0), mat.extent(1)});
  };
  return oracle::fd_jacobian_logdet(map, mat);
}

double round_trip_gap(const Transform& t, const Tensor& mat) {
  ad::NoGradGuard guard;
  Var x = ad::constant(mat.reshaped({1, mat.extent(0), mat.extent(1)}));
  Var back = t.inverse(t.forward(x).output).output;
  double worst = 0.0;
  for (std::size_t i = 0; i < mat.numel(); ++i) {
    worst = std::max(worst, std::abs(back->value[i] - mat[i]));
  }
  return worst;
}

// Every flow layer with a few random points per layer, plus the closed-form
// scale/mean case: lambda 2 and lambda + gamma 3 over three points give
// 2*log2 + log3.
Outcome check_transform_logdets() {
  Outcome out;
  Rng rng(101);
  ParamStore store;
  std::vector<std::pair<std::shared_ptr<Transform>, std::array<std::size_t, 2>>> layers;
  layers.push_back({std::make_shared<PointwiseCoupling>(store, rng, "vc", 3,
                                                        DimensionMask::alternating(3, 0), 8),
                    {4, 3}});
  layers.push_back({std::make_shared<SetCoupling>(store, rng, "vs", 3,
                                                  DimensionMask::alternating(3, 1), 8, 6),
                    {4, 3}});
  layers.push_back({std::make_shared<LeakyReluFlow>(0.3), {4, 3}});
  layers.push_back({std::make_shared<EquivariantLinear>(store, "vl", 2), {4, 2}});
  layers.push_back({std::make_shared<EquivariantSoftmaxMean>(store, "vm", 2), {4, 2}});
  layers.push_back(
      {std::make_shared<CorrespondenceCoupling>(store, rng, "vp", 2, PairParity::EvenFromOdd, 8),
       {4, 2}});
  layers.push_back({std::make_shared<RecurrentCoupling>(store, rng, "vr", 2, 6, 1), {3, 2}});
  store.randomize_uniform(rng, 0.3);

  int compared = 0;
  for (const auto& [layer, extents] : layers) {
    for (int trial = 0; trial < 10; ++trial) {
      Tensor mat = random_mat(rng, extents[0], extents[1]);
      double analytic = analytic_logdet(*layer, mat);
      double fd = fd_logdet(*layer, mat);
      double rel = std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
      ++compared;
      if (!(rel <= 1e-4)) {
        out.ok = false;
        out.detail = layer->name() + ": analytic " + fmt(analytic) + " vs finite-difference " +
                     fmt(fd) + " (rel " + fmt(rel) + ")";
        return out;
      }
    }
  }

  ParamStore fixed_store;
  auto fixed = EquivariantLinear::from_raw(fixed_store, "vf", {2.0}, {1.0});
  Tensor mat = random_mat(rng, 3, 1);
  double expected = 2.0 * std::log(2.0) + std::log(3.0);
  double analytic = analytic_logdet(*fixed, mat);
  double fd = fd_logdet(*fixed, mat);
  if (std::abs(analytic - expected) > 1e-9 || std::abs(fd - expected) > 1e-4) {
    out.ok = false;
    out.detail = "fixed scale/mean case: analytic " + fmt(analytic) + ", finite-difference " +
                 fmt(fd) + ", expected " + fmt(expected);
    return out;
  }
  out.detail = std::to_string(compared + 1) + " comparisons within 1e-4";
  return out;
}

Outcome check_transform_inverses() {
  Outcome out;
  Rng rng(202);
  ParamStore store;
  std::vector<std::shared_ptr<Transform>> layers = {
      std::make_shared<PointwiseCoupling>(store, rng, "ic", 3, DimensionMask::alternating(3, 0),
                                          8),
      std::make_shared<SetCoupling>(store, rng, "is", 3, DimensionMask::alternating(3, 1), 8, 6),
      std::make_shared<LeakyReluFlow>(0.3),
      std::make_shared<EquivariantLinear>(store, "il", 3),
      std::make_shared<EquivariantSoftmaxMean>(store, "im", 3),
      std::make_shared<CorrespondenceCoupling>(store, rng, "ip", 3, PairParity::OddFromEven, 8),
  };
  auto recurrent = std::make_shared<RecurrentCoupling>(store, rng, "ir", 3, 6, 1);
  store.randomize_uniform(rng, 0.3);

  for (const auto& layer : layers) {
    for (int trial = 0; trial < 10; ++trial) {
      double gap = round_trip_gap(*layer, random_mat(rng, 4, 3));
      if (!(gap <= 1e-8)) {
        out.ok = false;
        out.detail = layer->name() + " round trip off by " + fmt(gap);
        return out;
      }
    }
  }
  for (int trial = 0; trial < 10; ++trial) {
    double gap = round_trip_gap(*recurrent, random_mat(rng, 4, 3));
    if (!(gap <= 1e-7)) {
      out.ok = false;
      out.detail = "recurrent round trip off by " + fmt(gap);
      return out;
    }
  }

  Compose stack({layers[3], layers[0], std::make_shared<LeakyReluFlow>(0.4), layers[1], layers[4],
                 layers[5]});
  for (int trial = 0; trial < 10; ++trial) {
    double gap = round_trip_gap(stack, random_mat(rng, 4, 3));
    if (!(gap <= 1e-8)) {
      out.ok = false;
      out.detail = "six-layer stack round trip off by " + fmt(gap);
      return out;
    }
  }
  out.detail = "80 round trips within tolerance";
  return out;
}

double normal_logpdf(double v, double mu, double sd) {
  double z = (v - mu) / sd;
  return -0.5 * z * z - std::log(sd) - 0.9189385332046727;
}

// Hand-built exchangeable density over three scalars: two low slots and one
// high slot, averaged over the six slot assignments.
double mixture_exchangeable(double x0, double x1, double x2) {
  static const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                  {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  const double v[3] = {x0, x1, x2};
  double best = -std::numeric_limits<double>::infinity();
  double terms[6];
  for (int p = 0; p < 6; ++p) {
    terms[p] = normal_logpdf(v[perms[p][0]], -1.5, 0.5) + normal_logpdf(v[perms[p][1]], -1.5, 0.5) +
               normal_logpdf(v[perms[p][2]], 1.5, 0.8);
    best = std::max(best, terms[p]);
  }
  double acc = 0.0;
  for (int p = 0; p < 6; ++p) acc += std::exp(terms[p] - best);
  return best + std::log(acc) - std::log(6.0);
}

// The sequence density defined as 3! times the exchangeable density on
// ascending triples; pulling it back through the sort must reproduce the
// exchangeable density pointwise and integrate to one.
Outcome check_sorted_scan() {
  Outcome out;
  Rng rng(303);
  auto pulled_back = [](double a, double b, double c) {
    Var x = ad::constant(Tensor({1, 3, 1}, {a, b, c}));
    ScanResult scan = sort_scan(x, 1);
    const Tensor& z = scan.sorted->value;
    double seq = std::log(6.0) + mixture_exchangeable(z[0], z[1], z[2]);
    return scan.correction + seq;
  };
  for (int trial = 0; trial < 100; ++trial) {
    double a = rng.uniform(-4.0, 4.0);
    double b = rng.uniform(-4.0, 4.0);
    double c = rng.uniform(-4.0, 4.0);
    double direct = mixture_exchangeable(a, b, c);
    double scanned = pulled_back(a, b, c);
    if (std::abs(direct - scanned) > 1e-10) {
      out.ok = false;
      out.detail = "pointwise gap " + fmt(std::abs(direct - scanned)) + " at (" + fmt(a) + ", " +
                   fmt(b) + ", " + fmt(c) + ")";
      return out;
    }
  }
  oracle::GridBox box;
  box.lo = {-5.0, -5.0, -5.0};
  box.hi = {5.0, 5.0, 5.0};
  double mass = oracle::grid_normalization(
      [&](const std::vector<double>& pt) { return pulled_back(pt[0], pt[1], pt[2]); }, box, 81);
  if (std::abs(mass - 1.0) > 0.02) {
    out.ok = false;
    out.detail = "grid mass " + fmt(mass);
    return out;
  }
  out.detail = "100 points within 1e-10, grid mass " + fmt(mass);
  return out;
}

Outcome check_pair_couplings() {
  Outcome out;
  Rng rng(404);
  ParamStore store;
  CorrespondenceCoupling even(store, rng, "pe", 2, PairParity::EvenFromOdd, 8);
  CorrespondenceCoupling odd(store, rng, "po", 2, PairParity::OddFromEven, 8);
  RecurrentCoupling rec(store, rng, "pr", 2, 6, 1);
  store.randomize_uniform(rng, 0.3);

  const std::array<const Transform*, 3> layers = {&even, &odd, &rec};
  const std::array<double, 3> tolerances = {1e-8, 1e-8, 1e-7};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (int trial = 0; trial < 10; ++trial) {
      Tensor mat = random_mat(rng, i == 2 ? 3 : 5, 2);
      double gap = round_trip_gap(*layers[i], mat);
      if (!(gap <= tolerances[i])) {
        out.ok = false;
        out.detail = layers[i]->name() + " round trip off by " + fmt(gap);
        return out;
      }
      double analytic = analytic_logdet(*layers[i], mat);
      double fd = fd_logdet(*layers[i], mat);
      double rel = std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
      if (!(rel <= 1e-4)) {
        out.ok = false;
        out.detail = layers[i]->name() + " logdet rel gap " + fmt(rel);
        return out;
      }
    }
  }
  out.detail = "30 round trips and logdets within tolerance";
  return out;
}

FlowScanConfig small_config() {
  FlowScanConfig config;
  config.dim = 2;
  config.equivariant = {"eq_linear", "set_coupling:0", "coupling:1", "eq_softmax"};
  config.correspondence_depth = 2;
  config.recurrent_coupling = true;
  config.hidden = 6;
  config.mixture = 2;
  config.layers = 1;
  config.coupling_hidden = 6;
  config.embed_dim = 4;
  return config;
}

Outcome check_permutation_invariance() {
  Outcome out;
  Rng rng(505);
  std::vector<FlowScanConfig> configs;
  configs.push_back(small_config());
  {
    FlowScanConfig c = small_config();
    c.correspondence_depth = 0;
    c.recurrent_coupling = false;
    configs.push_back(c);
  }
  {
    FlowScanConfig c = small_config();
    c.equivariant = {};
    configs.push_back(c);
  }
  {
    FlowScanConfig c;
    c.dim = 2;
    c.cardinality = 6;
    c.equivariant = {};
    c.correspondence_depth = 0;
    c.base = BaseKind::Flat;
    c.mixture = 2;
    configs.push_back(c);
  }
  {
    FlowScanConfig c;
    c.dim = 2;
    c.equivariant = {};
    c.correspondence_depth = 0;
    c.base = BaseKind::Iid;
    c.hidden = 6;
    c.mixture = 2;
    c.layers = 1;
    configs.push_back(c);
  }

  Tensor batch({2, 6, 2});
  for (std::size_t i = 0; i < batch.numel(); ++i) batch[i] = rng.normal();
  double worst = 0.0;
  for (const auto& config : configs) {
    FlowScanModel model(config);
    model.params().randomize_uniform(rng, 0.4);
    Tensor reference = model.log_prob(SetBatch(batch));
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::size_t> perm(6);
      for (std::size_t i = 0; i < 6; ++i) perm[i] = i;
      rng.shuffle(perm);
      Tensor shuffled({2, 6, 2});
      for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t r = 0; r < 6; ++r) {
          for (std::size_t c = 0; c < 2; ++c) {
            shuffled[(b * 6 + r) * 2 + c] = batch[(b * 6 + perm[r]) * 2 + c];
          }
        }
      }
      Tensor permuted = model.log_prob(SetBatch(shuffled));
      for (std::size_t b = 0; b < 2; ++b) {
        worst = std::max(worst, std::abs(permuted[b] - reference[b]));
      }
    }
  }
  if (!(worst <= 1e-9)) {
    out.ok = false;
    out.detail = "worst permutation gap " + fmt(worst);
    return out;
  }
  out.detail = "100 permutations, worst gap " + fmt(worst);
  return out;
}

Outcome check_model_gradients() {
  Outcome out;
  Rng rng(606);
  FlowScanModel model(small_config());
  model.params().randomize_uniform(rng, 0.3);
  Tensor batch({2, 3, 2});
  for (std::size_t i = 0; i < batch.numel(); ++i) batch[i] = rng.normal();

  Var x = ad::constant(batch);
  Var loss = ad::div(ad::sum(model.ppll(x)), 2.0);
  backward(loss, model.params());
  std::map<std::string, Tensor> analytic;
  for (const auto& [name, var] : model.params().params()) analytic.emplace(name, var->grad);

  auto loss_value = [&]() {
    ad::NoGradGuard guard;
    Tensor values = model.ppll(SetBatch(batch));
    double total = 0.0;
    for (std::size_t i = 0; i < values.numel(); ++i) total += values[i];
    return total / static_cast<double>(values.numel());
  };
  auto fd = oracle::fd_gradient(loss_value, model.params());
  for (const auto& [name, grad] : analytic) {
    const Tensor& reference = fd.at(name);
    for (std::size_t i = 0; i < grad.numel(); ++i) {
      double gap = std::abs(grad[i] - reference[i]);
      if (!(gap <= 1e-6 + 1e-4 * std::abs(reference[i]))) {
        out.ok = false;
        out.detail = name + "[" + std::to_string(i) + "]: autodiff " + fmt(grad[i]) +
                     " vs finite-difference " + fmt(reference[i]);
        return out;
      }
    }
  }
  out.detail = std::to_string(model.params().count_scalars()) + " partials within 1e-4";
  return out;
}

Outcome check_checkpoint_round_trip() {
  Outcome out;
  Rng rng(707);
  FlowScanModel model(small_config());
  model.params().randomize_uniform(rng, 0.4);
  model.set_step(42);

  std::string path = (std::filesystem::temp_directory_path() /
                      ("flowscan_verify_" + std::to_string(::getpid()) + ".fsck"))
                         .string();
  model.save(path);
  FlowScanModel loaded = FlowScanModel::load(path);
  std::filesystem::remove(path);

  Tensor batch({3, 5, 2});
  for (std::size_t i = 0; i < batch.numel(); ++i) batch[i] = rng.normal();
  Tensor a = model.log_prob(SetBatch(batch));
  Tensor b = loaded.log_prob(SetBatch(batch));
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i]) {
      out.ok = false;
      out.detail = "log_prob differs after reload: " + fmt(a[i]) + " vs " + fmt(b[i]);
      return out;
    }
  }
  if (loaded.step() != 42) {
    out.ok = false;
    out.detail = "step counter lost";
    return out;
  }
  out.detail = "bitwise equal on 3 sets";
  return out;
}

}  // namespace

std::vector<CheckResult> run_checks(const std::string& scope) {
  if (scope != "all" && scope != "transforms" && scope != "scan" && scope != "model") {
    throw ConfigError("unknown verify scope '" + scope + "' (use all|transforms|scan|model)");
  }
  std::vector<std::pair<std::string, std::function<Outcome()>>> checks;
  if (scope == "all" || scope == "transforms") {
    checks.emplace_back("transform-logdets-match-finite-differences", check_transform_logdets);
    checks.emplace_back("transforms-invert-exactly", check_transform_inverses);
  }
  if (scope == "all" || scope == "scan") {
    checks.emplace_back("sorted-scan-preserves-symmetrized-density", check_sorted_scan);
    checks.emplace_back("pair-couplings-invert-and-match-finite-differences",
                        check_pair_couplings);
  }
  if (scope == "all" || scope == "model") {
    checks.emplace_back("model-ignores-point-order", check_permutation_invariance);
    checks.emplace_back("model-gradients-match-finite-differences", check_model_gradients);
    checks.emplace_back("checkpoints-reload-bitwise", check_checkpoint_round_trip);
  }

  std::vector<CheckResult> results;
  for (const auto& [name, fn] : checks) {
    auto t0 = std::chrono::steady_clock::now();
    Outcome outcome = fn();
    double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    results.push_back({name, outcome.ok, outcome.detail, ms});
  }
  return results;
}

bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const CheckResult& r) { return r.passed; });
}

}  // namespace verify
}  // namespace flowscan
