#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "flowscan/model.hpp"
#include "flowscan/oracle.hpp"

using namespace flowscan;
using autodiff::Var;

namespace {

int temp_counter = 0;

struct TempFile {
  std::string path;
  TempFile() {
    path = "/tmp/flowscan_model_test_" + std::to_string(::getpid()) + "_" +
           std::to_string(temp_counter++);
  }
  ~TempFile() { std::remove(path.c_str()); }
};

void zero_all(ParamStore& store) {
  for (const auto& [name, var] : store.params()) var->value.fill(0.0);
}

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

// Largest |log_prob(permuted x) - log_prob(x)| over random row permutations.
double permutation_gap(const FlowScanModel& model, const Tensor& batch, Rng& rng, int trials) {
  Tensor base = model.log_prob(SetBatch(batch));
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const auto perm = rng.permutation(batch.extent(1));
    Tensor shuffled = model.log_prob(SetBatch(permute_rows(batch, perm)));
    worst = std::max(worst, max_abs_diff(base, shuffled));
  }
  return worst;
}

FlowScanConfig small_full_config() {
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

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("empty stacks with a standard-normal base give the analytic value") {
  FlowScanConfig config;
  config.dim = 1;
  config.equivariant = {};
  config.correspondence_depth = 0;
  config.hidden = 4;
  config.mixture = 1;
  config.layers = 1;
  FlowScanModel model(config);
  zero_all(model.params());

  Tensor x({1, 2, 1}, {0.0, 0.0});
  const double lp = model.log_prob(SetBatch(x))[0];
  const double expected = -std::log(2.0) - std::log(2.0 * M_PI);
  CHECK(lp == doctest::Approx(expected).epsilon(1e-12));
  CHECK(lp == doctest::Approx(-2.53102).epsilon(1e-5));

  const double per_point = model.ppll(SetBatch(x))[0];
  CHECK(per_point == doctest::Approx(lp / 2.0).epsilon(1e-12));
  CHECK(per_point == doctest::Approx(-1.26551).epsilon(1e-5));

  Tensor single({1, 1, 1}, {0.3});
  CHECK(model.ppll(SetBatch(single))[0] == model.log_prob(SetBatch(single))[0]);
}

TEST_CASE("log probabilities are permutation invariant for every base kind") {
  Rng data_rng(3);
  Tensor batch = random_batch(data_rng, 2, 6, 2);

  FlowScanModel full(small_full_config());
  full.params().randomize_uniform(data_rng, 0.4);
  CHECK(permutation_gap(full, batch, data_rng, 100) < 1e-9);

  FlowScanConfig iid_config;
  iid_config.dim = 2;
  iid_config.equivariant = {};
  iid_config.correspondence_depth = 0;
  iid_config.base = BaseKind::Iid;
  iid_config.hidden = 6;
  iid_config.mixture = 2;
  iid_config.layers = 1;
  FlowScanModel iid(iid_config);
  iid.params().randomize_uniform(data_rng, 0.4);
  CHECK(permutation_gap(iid, batch, data_rng, 50) < 1e-9);

  FlowScanConfig flat_config;
  flat_config.dim = 2;
  flat_config.cardinality = 6;
  flat_config.equivariant = {};
  flat_config.correspondence_depth = 0;
  flat_config.base = BaseKind::Flat;
  flat_config.mixture = 2;
  FlowScanModel flat(flat_config);
  flat.params().randomize_uniform(data_rng, 0.4);
  CHECK(permutation_gap(flat, batch, data_rng, 50) < 1e-9);
}

TEST_CASE("grid mass equals the sequence density's weight on sorted pairs") {
  auto integrate = [](const FlowScanModel& model) {
    oracle::GridBox box;
    box.lo = {-6.0, -6.0};
    box.hi = {6.0, 6.0};
    return oracle::grid_normalization(
        [&](const std::vector<double>& pt) {
          return model.log_prob(SetBatch(Tensor({1, 2, 1}, {pt[0], pt[1]})))[0];
        },
        box, 201);
  };
  Rng rng(5);

  // A per-point base with no sorting stage is a genuine density on the
  // plane and integrates to one.
  FlowScanConfig iid_config;
  iid_config.dim = 1;
  iid_config.equivariant = {};
  iid_config.correspondence_depth = 0;
  iid_config.base = BaseKind::Iid;
  iid_config.hidden = 4;
  iid_config.mixture = 2;
  iid_config.layers = 1;
  FlowScanModel iid(iid_config);
  iid.params().randomize_uniform(rng, 0.1);
  CHECK(integrate(iid) == doctest::Approx(1.0).epsilon(0.02));

  // Sorting folds both orderings of the plane onto ascending pairs, so the
  // pulled-back density keeps exactly the mass the sequence density places
  // on ascending pairs and discards the rest. A freshly built model draws
  // the two coordinates from one shared mixture, which puts half its mass
  // on either ordering, so the integral is one half, not one.
  FlowScanConfig scan_config;
  scan_config.dim = 1;
  scan_config.equivariant = {"eq_linear", "eq_softmax"};
  scan_config.correspondence_depth = 2;
  scan_config.hidden = 4;
  scan_config.mixture = 2;
  scan_config.layers = 1;
  scan_config.coupling_hidden = 4;
  FlowScanModel fresh(scan_config);
  CHECK(integrate(fresh) == doctest::Approx(0.5).epsilon(0.01));

  scan_config.correspondence_depth = 0;
  scan_config.recurrent_coupling = true;
  FlowScanModel recurrent(scan_config);
  CHECK(integrate(recurrent) == doctest::Approx(0.5).epsilon(0.01));

  // Free per-position mixtures make the sorted-pair weight a closed form:
  // P(V1 <= V2) for independent draws from the two position mixtures.
  FlowScanConfig flat_config;
  flat_config.dim = 1;
  flat_config.cardinality = 2;
  flat_config.equivariant = {};
  flat_config.correspondence_depth = 0;
  flat_config.base = BaseKind::Flat;
  flat_config.mixture = 2;
  FlowScanModel flat(flat_config);
  flat.params().randomize_uniform(rng, 0.1);

  const Tensor& logits = flat.params().get("base.logits")->value;
  const Tensor& means = flat.params().get("base.means")->value;
  const Tensor& raws = flat.params().get("base.raw_scales")->value;
  const std::size_t k_mix = flat_config.mixture;
  auto weight = [&](std::size_t pos, std::size_t k) {
    double denom = 0.0;
    for (std::size_t j = 0; j < k_mix; ++j) {
      denom += std::exp(logits[pos * k_mix + j]);
    }
    return std::exp(logits[pos * k_mix + k]) / denom;
  };
  auto sigma = [&](std::size_t pos, std::size_t k) {
    return std::exp(7.0 * std::tanh(raws[pos * k_mix + k] / 7.0));
  };
  auto normal_cdf = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  double sorted_weight = 0.0;
  for (std::size_t k = 0; k < k_mix; ++k) {
    for (std::size_t l = 0; l < k_mix; ++l) {
      double gap = means[1 * k_mix + l] - means[0 * k_mix + k];
      double spread = std::sqrt(sigma(0, k) * sigma(0, k) + sigma(1, l) * sigma(1, l));
      sorted_weight += weight(0, k) * weight(1, l) * normal_cdf(gap / spread);
    }
  }
  double flat_mass = integrate(flat);
  CHECK(flat_mass == doctest::Approx(sorted_weight).epsilon(0.02));
  CHECK(flat_mass < 0.7);
}

TEST_CASE("identity pair couplings change nothing until trained") {
  FlowScanConfig with = small_full_config();
  with.recurrent_coupling = false;
  FlowScanConfig without = with;
  without.correspondence_depth = 0;

  FlowScanModel a(with);
  FlowScanModel b(without);
  Rng rng(11);
  a.params().randomize_uniform(rng, 0.4);
  // Give b the same values for every parameter the two models share. The
  // pair couplings in a keep their zero heads, so they are still identities.
  for (const auto& [name, var] : a.params().params()) {
    if (name.rfind("corr", 0) == 0) var->value.fill(0.0);
  }
  for (const auto& [name, var] : b.params().params()) {
    var->value = Tensor(a.params().get(name)->value);
  }

  Tensor batch = random_batch(rng, 2, 5, 2);
  CHECK(max_abs_diff(a.log_prob(SetBatch(batch)), b.log_prob(SetBatch(batch))) == 0.0);

  // Trained (here: randomized) pair couplings do change the density.
  a.params().randomize_uniform(rng, 0.4);
  for (const auto& [name, var] : b.params().params()) {
    var->value = Tensor(a.params().get(name)->value);
  }
  CHECK(max_abs_diff(a.log_prob(SetBatch(batch)), b.log_prob(SetBatch(batch))) > 1e-6);
}

TEST_CASE("checkpoints round trip bitwise") {
  FlowScanModel model(small_full_config());
  Rng rng(13);
  model.params().randomize_uniform(rng, 0.5);
  model.set_step(17);

  TempFile file;
  model.save(file.path);
  FlowScanModel loaded = FlowScanModel::load(file.path);

  CHECK(loaded.step() == 17);
  CHECK(loaded.config().to_json() == model.config().to_json());
  for (const auto& [name, var] : model.params().params()) {
    CHECK(max_abs_diff(loaded.params().get(name)->value, var->value) == 0.0);
  }
  for (int i = 0; i < 10; ++i) {
    Tensor batch = random_batch(rng, 1, 5, 2);
    Tensor a = model.log_prob(SetBatch(batch));
    Tensor b = loaded.log_prob(SetBatch(batch));
    CHECK(a[0] == b[0]);
  }
}

TEST_CASE("ablation checkpoints keep their flags") {
  FlowScanConfig config;
  config.dim = 2;
  config.cardinality = 4;
  config.equivariant = {};
  config.correspondence_depth = 0;
  config.base = BaseKind::Flat;
  config.mixture = 3;
  FlowScanModel model(config);

  TempFile file;
  model.save(file.path);
  FlowScanModel loaded = FlowScanModel::load(file.path);
  CHECK(loaded.config().base == BaseKind::Flat);
  CHECK(loaded.config().cardinality == 4);
  CHECK(loaded.config().equivariant.empty());
}

TEST_CASE("corrupt checkpoints raise distinct error kinds") {
  FlowScanModel model(small_full_config());
  TempFile file;
  model.save(file.path);
  const std::string bytes = slurp(file.path);

  TempFile bad;
  spit(bad.path, "NOPE" + bytes.substr(4));
  CHECK_THROWS_AS(FlowScanModel::load(bad.path), FormatError);
  try {
    FlowScanModel::load(bad.path);
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatError::Kind::BadMagic);
  }

  std::string versioned = bytes;
  versioned[4] = 9;
  spit(bad.path, versioned);
  try {
    FlowScanModel::load(bad.path);
    FAIL("version mismatch not detected");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatError::Kind::BadVersion);
  }

  spit(bad.path, bytes.substr(0, bytes.size() * 3 / 5));
  try {
    FlowScanModel::load(bad.path);
    FAIL("truncation not detected");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatError::Kind::Truncated);
  }

  spit(bad.path, bytes + "junk");
  try {
    FlowScanModel::load(bad.path);
    FAIL("trailing bytes not detected");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatError::Kind::SchemaMismatch);
  }

  CHECK_THROWS_AS(FlowScanModel::load("/tmp/flowscan_no_such_checkpoint"), DataError);
}

TEST_CASE("identity model samples independent standard normals") {
  FlowScanConfig config;
  config.dim = 2;
  config.equivariant = {};
  config.correspondence_depth = 0;
  config.hidden = 4;
  config.mixture = 1;
  config.layers = 1;
  FlowScanModel model(config);
  zero_all(model.params());

  Rng rng(19);
  double sum[2] = {0.0, 0.0};
  double sq[3] = {0.0, 0.0, 0.0};  // xx, yy, xy
  const int sets = 100, points = 100;
  for (int s = 0; s < sets; ++s) {
    SetBatch draw = model.sample(points, rng);
    for (int i = 0; i < points; ++i) {
      const double x = draw.values[i * 2];
      const double y = draw.values[i * 2 + 1];
      sum[0] += x;
      sum[1] += y;
      sq[0] += x * x;
      sq[1] += y * y;
      sq[2] += x * y;
    }
  }
  const double count = sets * points;
  const double mx = sum[0] / count, my = sum[1] / count;
  CHECK(std::fabs(mx) < 0.05);
  CHECK(std::fabs(my) < 0.05);
  CHECK(sq[0] / count - mx * mx == doctest::Approx(1.0).epsilon(0.1));
  CHECK(sq[1] / count - my * my == doctest::Approx(1.0).epsilon(0.1));
  CHECK(std::fabs(sq[2] / count - mx * my) < 0.05);
}

TEST_CASE("sampling is deterministic and scoreable through full stacks") {
  FlowScanModel model(small_full_config());
  Rng rng(23);
  model.params().randomize_uniform(rng, 0.3);

  Rng s1(7), s2(7), s3(8);
  SetBatch a = model.sample(6, s1);
  SetBatch b = model.sample(6, s2);
  SetBatch c = model.sample(6, s3);
  CHECK(max_abs_diff(a.values, b.values) == 0.0);
  CHECK(max_abs_diff(a.values, c.values) > 0.0);

  Tensor lp = model.log_prob(a);
  CHECK(std::isfinite(lp[0]));

  SetBatch single = model.sample(1, s1);
  CHECK(single.values.extent(1) == 1);
  CHECK(std::isfinite(model.log_prob(single)[0]));
}

TEST_CASE("per point scores divide the whole-set score") {
  FlowScanModel model(small_full_config());
  Rng rng(29);
  model.params().randomize_uniform(rng, 0.3);
  Tensor batch = random_batch(rng, 3, 5, 2);
  Tensor lp = model.log_prob(SetBatch(batch));
  Tensor per = model.ppll(SetBatch(batch));
  double mean_lp = 0.0, mean_per = 0.0;
  for (std::size_t b = 0; b < 3; ++b) {
    CHECK(per[b] == doctest::Approx(lp[b] / 5.0).epsilon(1e-12));
    mean_lp += lp[b] / 5.0;
    mean_per += per[b];
  }
  CHECK(mean_per / 3.0 == doctest::Approx(mean_lp / 3.0).epsilon(1e-12));
}

TEST_CASE("mean per point gradients match finite differences end to end") {
  FlowScanModel model(small_full_config());
  Rng rng(31);
  model.params().randomize_uniform(rng, 0.3);
  Tensor batch = random_batch(rng, 2, 3, 2);
  ParamStore& store = model.params();

  auto loss_fn = [&]() {
    autodiff::NoGradGuard guard;
    Var v = model.ppll(autodiff::constant(batch));
    return autodiff::div(autodiff::sum(v), 2.0)->value.item();
  };
  Var loss = autodiff::div(autodiff::sum(model.ppll(autodiff::constant(batch))), 2.0);
  backward(loss, store);
  auto fd = oracle::fd_gradient(loss_fn, store);
  for (const auto& [name, var] : store.params()) {
    const Tensor& approx = fd.at(name);
    for (std::size_t i = 0; i < approx.numel(); ++i) {
      const double got = var->grad[i];
      const double want = approx[i];
      CHECK(std::fabs(got - want) <= 1e-6 + 1e-4 * std::fabs(want));
    }
  }
}

TEST_CASE("schema and config violations are rejected") {
  FlowScanModel model(small_full_config());
  Rng sample_rng(1);
  CHECK_THROWS_AS(model.log_prob(SetBatch(Tensor({1, 3, 3}))), ShapeError);
  CHECK_THROWS_AS(model.sample(0, sample_rng), ConfigError);

  FlowScanConfig flat;
  flat.dim = 1;
  flat.cardinality = 0;
  flat.base = BaseKind::Flat;
  flat.equivariant = {};
  flat.correspondence_depth = 0;
  CHECK_THROWS_AS(FlowScanModel{flat}, ConfigError);

  FlowScanConfig iid;
  iid.dim = 2;
  iid.base = BaseKind::Iid;
  iid.equivariant = {"eq_linear"};
  iid.correspondence_depth = 0;
  CHECK_THROWS_AS(FlowScanModel{iid}, ConfigError);

  FlowScanConfig fixed = small_full_config();
  fixed.cardinality = 4;
  FlowScanModel pinned(fixed);
  CHECK_THROWS_AS(pinned.log_prob(SetBatch(Tensor({1, 5, 2}))), ShapeError);
  Rng rng(1);
  CHECK_THROWS_AS(pinned.sample(5, rng), ConfigError);

  CHECK_THROWS_AS(FlowScanConfig::from_json("{\"dim\": 2, \"bogus\": 1}"), ConfigError);
  CHECK_THROWS_AS(FlowScanConfig::from_json("{\"equivariant\": [\"warp\"]}"), ConfigError);
  CHECK_THROWS_AS(FlowScanConfig::from_json("not json"), ConfigError);
  CHECK_THROWS_AS(FlowScanConfig::from_json("{\"sort_key\": 5}"), ConfigError);
}

TEST_CASE("configs serialize to stable JSON") {
  FlowScanConfig config = small_full_config();
  config.cardinality = 9;
  config.base = BaseKind::Scan;
  const std::string text = config.to_json();
  FlowScanConfig back = FlowScanConfig::from_json(text);
  CHECK(back.to_json() == text);
  CHECK(back.equivariant == config.equivariant);
  CHECK(back.recurrent_coupling == config.recurrent_coupling);
  CHECK(back.init_seed == config.init_seed);
}
