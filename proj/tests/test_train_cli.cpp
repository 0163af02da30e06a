#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

#include "flowscan/train.hpp"

using namespace flowscan;
namespace fs = std::filesystem;

namespace {

int dir_counter = 0;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("flowscan_cli_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(dir_counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& leaf) const { return (path / leaf).string(); }
};

int run_cmd(const std::string& command) {
  int status = std::system(command.c_str());
  REQUIRE(status != -1);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

// Metrics text with the wall-clock column removed, for determinism
// comparisons.
std::string strip_wall(const std::string& csv) {
  std::istringstream lines(csv);
  std::string line, out;
  while (std::getline(lines, line)) {
    std::size_t last = line.rfind(',');
    out += line.substr(0, last) + "\n";
  }
  return out;
}

FlowScanConfig tiny_model_config() {
  FlowScanConfig config = FlowScanConfig::defaults(2);
  config.hidden = 6;
  config.mixture = 2;
  config.layers = 1;
  config.coupling_hidden = 6;
  config.embed_dim = 4;
  return config;
}

struct SinusoidSplits {
  SetDataset train;
  SetDataset val;
};

SinusoidSplits tiny_sinusoid() {
  SetDataset data = split(gen_sinusoid(60, 5, 3), 0.8, 0.1, 0.1, 11);
  return {data.subset(data.indices_of(Split::Train)), data.subset(data.indices_of(Split::Val))};
}

const std::string kTinyIni =
    "[data]\n"
    "generator = sinusoid\n"
    "count = 60\n"
    "points = 5\n"
    "seed = 3\n"
    "\n"
    "[model]\n"
    "hidden = 6\n"
    "mixture = 2\n"
    "layers = 1\n"
    "coupling_hidden = 6\n"
    "embed_dim = 4\n"
    "\n"
    "[train]\n"
    "iterations = 10\n"
    "batch = 8\n"
    "eval_interval = 5\n"
    "seed = 1\n";

}  // namespace

TEST_CASE("short fits log a starting row and a final row") {
  auto data = tiny_sinusoid();
  FlowScanModel model(tiny_model_config());
  TrainConfig config;
  config.iterations = 10;
  config.batch_size = 8;
  config.eval_interval = 5;

  TrainResult result = fit(model, data.train, data.val, config);
  CHECK(result.steps_run == 10);
  CHECK(result.metrics.size() == 3);
  CHECK(result.metrics.front().step == 0);
  CHECK(result.metrics.back().step == 10);
  CHECK(std::isfinite(result.best_val_ppll));
  CHECK_FALSE(result.nan_abort);
  CHECK(model.step() == 10);
}

TEST_CASE("the same seed reproduces every metric") {
  auto data = tiny_sinusoid();
  TrainConfig config;
  config.iterations = 12;
  config.batch_size = 8;
  config.eval_interval = 4;

  FlowScanModel a(tiny_model_config());
  FlowScanModel b(tiny_model_config());
  TrainResult ra = fit(a, data.train, data.val, config);
  TrainResult rb = fit(b, data.train, data.val, config);
  REQUIRE(ra.metrics.size() == rb.metrics.size());
  for (std::size_t i = 0; i < ra.metrics.size(); ++i) {
    CHECK(ra.metrics[i].step == rb.metrics[i].step);
    CHECK(ra.metrics[i].train_ppll == rb.metrics[i].train_ppll);
    CHECK(ra.metrics[i].val_ppll == rb.metrics[i].val_ppll);
  }
}

TEST_CASE("a few hundred steps buy more than a nat on easy data") {
  auto data = tiny_sinusoid();
  FlowScanModel model(tiny_model_config());
  TrainConfig config;
  config.iterations = 400;
  config.batch_size = 16;
  config.eval_interval = 100;

  std::vector<const FlowScanModel*> best_calls;
  TrainResult result = fit(model, data.train, data.val, config, {},
                           [&](const FlowScanModel& m) { best_calls.push_back(&m); });
  REQUIRE(result.metrics.size() >= 2);
  double gain = result.metrics.back().train_ppll - result.metrics.front().train_ppll;
  CHECK(gain >= 1.0);
  CHECK(result.best_val_ppll >= result.metrics.front().val_ppll);
  CHECK(!best_calls.empty());
}

TEST_CASE("a non-finite loss aborts and restores finite parameters") {
  auto data = tiny_sinusoid();
  FlowScanModel model(tiny_model_config());
  TrainConfig config;
  config.iterations = 50;
  config.eval_interval = 2;
  config.batch_size = 8;

  // The mixture means come straight from this bias, so a huge value sends
  // the squared residuals over the double range.
  auto poison = [&](const MetricsRow& row) {
    if (row.step == 2) {
      model.params().get("base.dim0.b2")->value.fill(1e200);
    }
  };
  TrainResult result = fit(model, data.train, data.val, config, poison);
  CHECK(result.nan_abort);
  CHECK(result.steps_run < 50);
  for (const auto& [name, var] : model.params().params()) {
    CAPTURE(name);
    CHECK(var->value.all_finite());
  }
  // The restored parameters score exactly like the last finite row.
  double restored = mean_ppll(model, data.val);
  CHECK(restored == doctest::Approx(result.metrics[1].val_ppll).epsilon(1e-12));
}

TEST_CASE("patience stops a run that cannot improve") {
  auto data = tiny_sinusoid();
  FlowScanModel model(tiny_model_config());
  TrainConfig config;
  config.iterations = 50;
  config.eval_interval = 1;
  config.batch_size = 4;
  config.learning_rate = 1e-30;
  config.patience = 2;

  TrainResult result = fit(model, data.train, data.val, config);
  CHECK(result.early_stopped);
  CHECK(result.steps_run < 50);
  CHECK_FALSE(result.nan_abort);
}

TEST_CASE("reports cover the spread of per-set scores") {
  auto data = tiny_sinusoid();
  FlowScanModel model(tiny_model_config());

  PpllReport report = ppll_report(model, data.train);
  CHECK(report.n_sets == data.train.size());
  CHECK(report.mean_ppll == doctest::Approx(mean_ppll(model, data.train)).epsilon(1e-12));
  CHECK(report.std_error > 0.0);

  SetDataset one = data.train.subset({0});
  PpllReport single = ppll_report(model, one);
  CHECK(single.n_sets == 1);
  CHECK(single.std_error == 0.0);
  Tensor direct = model.ppll(SetBatch(one.sets[0].reshaped({1, 5, 2})));
  CHECK(single.mean_ppll == doctest::Approx(direct[0]).epsilon(1e-12));
}

TEST_CASE("rejected training setups name the offending field") {
  auto data = tiny_sinusoid();
  FlowScanModel model(tiny_model_config());
  TrainConfig config;
  config.iterations = 0;
  CHECK_THROWS_AS(fit(model, data.train, data.val, config), ConfigError);
  config.iterations = 5;
  config.batch_size = 0;
  CHECK_THROWS_AS(fit(model, data.train, data.val, config), ConfigError);
  config.batch_size = 4;
  SetDataset empty;
  CHECK_THROWS_AS(fit(model, empty, data.val, config), DataError);
  CHECK_THROWS_AS(mean_ppll(model, empty), DataError);
}

TEST_CASE("the train command writes a complete reproducible run") {
  TempDir dir;
  std::string ini = kTinyIni + "\n[output]\ndir = " + dir.str("run") + "\n";
  spit(dir.str("tiny.ini"), ini);

  std::string base = std::string(FLOWSCAN_BIN) + " train --config " + dir.str("tiny.ini");
  CHECK(run_cmd(base + " > " + dir.str("out1.txt") + " 2>&1") == 0);
  CHECK(run_cmd(base + " > " + dir.str("out2.txt") + " 2>&1") == 0);

  CHECK(fs::exists(dir.str("run/best.fsck")));
  CHECK(fs::exists(dir.str("run/final.fsck")));
  CHECK(fs::exists(dir.str("run/metrics.csv")));
  // The second run must not touch the first directory.
  CHECK(fs::exists(dir.str("run-2/metrics.csv")));
  CHECK(slurp(dir.str("run/config.ini")) == ini);

  std::string csv = slurp(dir.str("run/metrics.csv"));
  CHECK(csv.rfind("step,train_ppll,val_ppll,wall_ms\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') >= 3);
  CHECK(strip_wall(csv) == strip_wall(slurp(dir.str("run-2/metrics.csv"))));
}

TEST_CASE("the eval command reports every split as json") {
  TempDir dir;
  std::string ini = kTinyIni + "\n[output]\ndir = " + dir.str("run") + "\n";
  spit(dir.str("tiny.ini"), ini);
  std::string bin(FLOWSCAN_BIN);
  REQUIRE(run_cmd(bin + " train --config " + dir.str("tiny.ini") + " > /dev/null 2>&1") == 0);

  int code = run_cmd(bin + " eval --config " + dir.str("tiny.ini") + " --model.checkpoint " +
                     dir.str("run/best.fsck") + " --output.dir " + dir.str("report") +
                     " > /dev/null 2>&1");
  CHECK(code == 0);
  auto report = nlohmann::json::parse(slurp(dir.str("report/eval.json")));
  REQUIRE(report.contains("train"));
  REQUIRE(report.contains("val"));
  REQUIRE(report.contains("test"));
  std::size_t total = 0;
  for (const auto& name : {"train", "val", "test"}) {
    CHECK(std::isfinite(report[name]["mean_ppll"].get<double>()));
    CHECK(report[name]["stderr"].get<double>() >= 0.0);
    total += report[name]["n_sets"].get<std::size_t>();
  }
  CHECK(total == 60);
}

TEST_CASE("the sample command writes readable deterministic sets") {
  TempDir dir;
  std::string ini = kTinyIni + "\n[output]\ndir = " + dir.str("run") + "\n";
  spit(dir.str("tiny.ini"), ini);
  std::string bin(FLOWSCAN_BIN);
  REQUIRE(run_cmd(bin + " train --config " + dir.str("tiny.ini") + " > /dev/null 2>&1") == 0);

  auto sample_into = [&](const std::string& leaf, const std::string& extra) {
    return bin + " sample --config " + dir.str("tiny.ini") + " --model.checkpoint " +
           dir.str("run/final.fsck") + " --data.count 12 --data.points 5 --output.dir " +
           dir.str(leaf) + extra + " > /dev/null 2>&1";
  };
  CHECK(run_cmd(sample_into("s1", " --output.csv true --output.svg true")) == 0);
  CHECK(run_cmd(sample_into("s2", "")) == 0);

  SetDataset samples = read_fset(dir.str("s1/samples.fset"));
  CHECK(samples.size() == 12);
  CHECK(samples.dim() == 2);
  for (const Tensor& set : samples.sets) CHECK(set.extent(0) == 5);
  CHECK(fs::exists(dir.str("s1/samples.csv")));
  CHECK(fs::exists(dir.str("s1/samples.svg")));
  CHECK(slurp(dir.str("s1/samples.fset")) == slurp(dir.str("s2/samples.fset")));

  CHECK(run_cmd("FLOWSCAN_SEED=77 " + sample_into("s3", "")) == 0);
  CHECK(slurp(dir.str("s1/samples.fset")) != slurp(dir.str("s3/samples.fset")));
}

TEST_CASE("exit codes separate usage, data, and numeric failures") {
  TempDir dir;
  std::string bin(FLOWSCAN_BIN);
  std::string quiet = " > /dev/null 2>&1";

  CHECK(run_cmd(bin + quiet) == 1);
  CHECK(run_cmd(bin + " frobnicate --config x.ini" + quiet) == 1);
  CHECK(run_cmd(bin + " train" + quiet) == 1);
  CHECK(run_cmd(bin + " train --config " + dir.str("missing.ini") + quiet) == 2);
  CHECK(run_cmd(bin + " verify --verify.scope bogus" + quiet) == 1);
  CHECK(run_cmd(bin + " --help" + quiet) == 0);

  spit(dir.str("bad_key.ini"), "[train]\niterations = 5\nlearning = fast\n");
  CHECK(run_cmd(bin + " train --config " + dir.str("bad_key.ini") + quiet) == 1);

  std::string ini = kTinyIni + "\n[output]\ndir = " + dir.str("run") + "\n";
  spit(dir.str("tiny.ini"), ini);
  CHECK(run_cmd(bin + " eval --config " + dir.str("tiny.ini") + " --output.dir " + dir.str("e") +
                quiet) == 1);
  CHECK(run_cmd(bin + " eval --config " + dir.str("tiny.ini") + " --model.checkpoint " +
                dir.str("nope.fsck") + " --output.dir " + dir.str("e") + quiet) == 2);

  // A huge learning rate blows the parameters up; training must abort with
  // the numeric exit code yet still leave the run directory usable.
  int code = run_cmd(bin + " train --config " + dir.str("tiny.ini") +
                     " --train.lr 1e12 --train.eval_interval 1 --output.dir " +
                     dir.str("explode") + quiet);
  CHECK(code == 3);
  CHECK(fs::exists(dir.str("explode/final.fsck")));
  FlowScanModel survivor = FlowScanModel::load(dir.str("explode/final.fsck"));
  for (const auto& [name, var] : survivor.params().params()) {
    CAPTURE(name);
    CHECK(var->value.all_finite());
  }
}

TEST_CASE("verify exits cleanly and trips on an injected jacobian fault") {
  TempDir dir;
  std::string bin(FLOWSCAN_BIN);
  CHECK(run_cmd(bin + " verify --verify.scope transforms > " + dir.str("ok.txt") + " 2>&1") == 0);
  std::string ok = slurp(dir.str("ok.txt"));
  CHECK(ok.find("PASS transform-logdets-match-finite-differences") != std::string::npos);

  int code = run_cmd(bin + " verify --verify.break_eq_logdet 0.1 > " + dir.str("bad.txt") +
                     " 2>&1");
  CHECK(code == 4);
  std::string bad = slurp(dir.str("bad.txt"));
  CHECK(bad.find("FAIL transform-logdets-match-finite-differences") != std::string::npos);
  CHECK(bad.find("6/7 checks passed") != std::string::npos);
}
