#include "flowscan/cli.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "flowscan/errors.hpp"
#include "flowscan/run_config.hpp"
#include "flowscan/train.hpp"
#include "flowscan/transforms.hpp"
#include "flowscan/verify.hpp"

namespace flowscan {
namespace cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const char* kUsage = R"(usage: flowscan <command> --config PATH [--section.key value]...

commands:
  train    fit a model: writes metrics.csv, best.fsck, final.fsck
  eval     score a checkpoint per split: writes eval.json
  sample   draw point sets from a checkpoint: writes samples.fset
  verify   run the property suite (--verify.scope all|transforms|scan|model)

The config file is INI-style with sections [data] [model] [train] [output]
and # comments. Any key can be overridden on the command line, for example
`--train.iterations 200`. The FLOWSCAN_SEED environment variable overrides
train.seed. `verify` works without a config file.

exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numeric abort,
4 verification failure.
)";

struct Args {
  std::string command;
  std::string config_path;
  std::vector<std::array<std::string, 3>> overrides;
  bool help = false;
};

Args parse_args(int argc, const char* const* argv) {
  Args args;
  if (argc < 2) return args;
  args.command = argv[1];
  if (args.command == "--help" || args.command == "-h") {
    args.help = true;
    return args;
  }
  for (int i = 2; i < argc; ++i) {
    std::string flag = argv[i];
    if (flag == "--help" || flag == "-h") {
      args.help = true;
      continue;
    }
    if (flag.rfind("--", 0) != 0) {
      throw UsageError("unexpected argument '" + flag + "'");
    }
    if (i + 1 >= argc) {
      throw UsageError("flag '" + flag + "' needs a value");
    }
    std::string value = argv[++i];
    std::string name = flag.substr(2);
    if (name == "config") {
      args.config_path = value;
      continue;
    }
    std::size_t dot = name.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == name.size()) {
      throw UsageError("flag '" + flag + "' is neither --config nor --section.key");
    }
    args.overrides.push_back({name.substr(0, dot), name.substr(dot + 1), value});
  }
  return args;
}

std::string claim_run_dir(const std::string& requested) {
  fs::path base(requested);
  fs::path chosen = base;
  int suffix = 2;
  while (fs::exists(chosen)) {
    chosen = base;
    chosen += "-" + std::to_string(suffix++);
  }
  std::error_code ec;
  fs::create_directories(chosen, ec);
  if (ec) {
    throw DataError("cannot create output directory '" + chosen.string() + "': " + ec.message());
  }
  return chosen.string();
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir + "': " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
  if (!out) throw DataError("write failed for '" + path + "'");
}

void echo_config(const IniConfig& config, const std::string& dir, const std::string& stem) {
  write_text(dir + "/" + stem + ".ini", config.raw_text());
  if (!config.overrides().empty()) {
    std::string lines;
    for (const auto& line : config.overrides()) lines += line + "\n";
    write_text(dir + "/" + stem + ".overrides", lines);
  }
}

std::size_t constant_cardinality(const SetDataset& dataset) {
  if (dataset.size() == 0) return 0;
  std::size_t n = dataset.sets[0].extent(0);
  for (const Tensor& set : dataset.sets) {
    if (set.extent(0) != n) return 0;
  }
  return n;
}

std::string metrics_line(const MetricsRow& row) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.3f\n", row.step, row.train_ppll,
                row.val_ppll, row.wall_ms);
  return buf;
}

// Minimal scatter of up to eight 2-d sets, one fill color per set.
void write_svg(const std::string& path, const SetDataset& samples) {
  static const char* palette[8] = {"#1f6f8b", "#c05850", "#5a8f57", "#8a6bbf",
                                   "#bf8a3d", "#4f4f4f", "#3da0a0", "#b05c8a"};
  std::size_t shown = std::min<std::size_t>(samples.size(), 8);
  double lo_x = 0.0, hi_x = 1.0, lo_y = 0.0, hi_y = 1.0;
  bool first = true;
  for (std::size_t s = 0; s < shown; ++s) {
    const Tensor& set = samples.sets[s];
    for (std::size_t i = 0; i < set.extent(0); ++i) {
      double x = set[i * 2];
      double y = set[i * 2 + 1];
      if (first) {
        lo_x = hi_x = x;
        lo_y = hi_y = y;
        first = false;
      }
      lo_x = std::min(lo_x, x);
      hi_x = std::max(hi_x, x);
      lo_y = std::min(lo_y, y);
      hi_y = std::max(hi_y, y);
    }
  }
  double span = std::max({hi_x - lo_x, hi_y - lo_y, 1e-9});
  const double size = 420.0, margin = 14.0, scale = (size - 2 * margin) / span;
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"420\" height=\"420\" "
                    "viewBox=\"0 0 420 420\">\n"
                    "<rect width=\"420\" height=\"420\" fill=\"#fbfbf8\"/>\n";
  char buf[160];
  for (std::size_t s = 0; s < shown; ++s) {
    const Tensor& set = samples.sets[s];
    for (std::size_t i = 0; i < set.extent(0); ++i) {
      double px = margin + (set[i * 2] - lo_x) * scale;
      double py = size - margin - (set[i * 2 + 1] - lo_y) * scale;
      std::snprintf(buf, sizeof(buf),
                    "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\" opacity=\"0.75\"/>\n",
                    px, py, palette[s % 8]);
      svg += buf;
    }
  }
  svg += "</svg>\n";
  write_text(path, svg);
}

int cmd_train(const IniConfig& config) {
  SetDataset dataset = realize_dataset(DataSpec::from(config));
  dataset.validate();
  FlowScanConfig model_config =
      model_config_from(config, dataset.dim(), constant_cardinality(dataset));
  if (model_config.dim != dataset.dim()) {
    throw ConfigError("model.dim " + std::to_string(model_config.dim) + " but the dataset has " +
                      std::to_string(dataset.dim()) + " coordinates per point");
  }
  TrainConfig train_config = train_config_from(config);
  std::size_t checkpoint_interval = config.get_count("train", "checkpoint_interval", 0);

  std::string requested = config.get_string("output", "dir", "");
  if (requested.empty()) throw ConfigError("output.dir is required for train");
  std::string dir = claim_run_dir(requested);
  echo_config(config, dir, "config");
  std::printf("run directory: %s\n", dir.c_str());

  SetDataset train_split = dataset.subset(dataset.indices_of(Split::Train));
  SetDataset val_split = dataset.subset(dataset.indices_of(Split::Val));
  if (train_split.size() == 0) throw DataError("no sets labeled for training");
  if (val_split.size() == 0) throw DataError("no sets labeled for validation");

  FlowScanModel model(model_config);
  std::printf("model: %zu parameters\n", model.params().count_scalars());

  std::ofstream metrics(dir + "/metrics.csv", std::ios::binary);
  if (!metrics) throw DataError("cannot write '" + dir + "/metrics.csv'");
  metrics << "step,train_ppll,val_ppll,wall_ms\n";
  std::size_t written = 0;

  auto on_metrics = [&](const MetricsRow& row) {
    metrics << metrics_line(row);
    metrics.flush();
    ++written;
    std::printf("step %zu: train ppll %.4f, val ppll %.4f\n", row.step, row.train_ppll,
                row.val_ppll);
    if (checkpoint_interval > 0 && row.step > 0 && row.step % checkpoint_interval == 0) {
      model.save(dir + "/latest.fsck");
    }
  };
  auto on_best = [&](const FlowScanModel& best) { best.save(dir + "/best.fsck"); };

  TrainResult result = fit(model, train_split, val_split, train_config, on_metrics, on_best);
  for (std::size_t i = written; i < result.metrics.size(); ++i) {
    metrics << metrics_line(result.metrics[i]);
  }
  metrics.close();
  model.save(dir + "/final.fsck");

  if (result.nan_abort) {
    std::fprintf(stderr,
                 "training aborted on a non-finite loss after %zu steps; "
                 "parameters were restored from the last finite evaluation\n",
                 result.steps_run);
    return 3;
  }
  std::printf("best val ppll %.4f at step %zu%s\n", result.best_val_ppll, result.best_step,
              result.early_stopped ? " (stopped early)" : "");
  return 0;
}

int cmd_eval(const IniConfig& config) {
  std::string checkpoint = config.get_string("model", "checkpoint", "");
  if (checkpoint.empty()) throw ConfigError("model.checkpoint is required for eval");
  FlowScanModel model = FlowScanModel::load(checkpoint);

  SetDataset dataset = realize_dataset(DataSpec::from(config));
  dataset.validate();

  std::string dir = config.get_string("output", "dir", "");
  if (dir.empty()) throw ConfigError("output.dir is required for eval");
  ensure_dir(dir);
  echo_config(config, dir, "config.eval");

  json report = json::object();
  auto add = [&](const std::string& name, const SetDataset& subset) {
    if (subset.size() == 0) return;
    PpllReport r = ppll_report(model, subset);
    report[name] = {{"mean_ppll", r.mean_ppll}, {"stderr", r.std_error}, {"n_sets", r.n_sets}};
  };
  if (dataset.splits.empty()) {
    add("all", dataset);
  } else {
    add("train", dataset.subset(dataset.indices_of(Split::Train)));
    add("val", dataset.subset(dataset.indices_of(Split::Val)));
    add("test", dataset.subset(dataset.indices_of(Split::Test)));
  }
  std::string text = report.dump(2) + "\n";
  std::fputs(text.c_str(), stdout);
  write_text(dir + "/eval.json", text);
  return 0;
}

int cmd_sample(const IniConfig& config) {
  std::string checkpoint = config.get_string("model", "checkpoint", "");
  if (checkpoint.empty()) throw ConfigError("model.checkpoint is required for sample");
  FlowScanModel model = FlowScanModel::load(checkpoint);

  std::size_t count = config.get_count("data", "count", 100);
  std::size_t points = config.get_count("data", "points", model.config().cardinality);
  if (points == 0) {
    throw ConfigError("data.points is required: the checkpoint accepts any cardinality");
  }
  std::uint64_t seed = config.get_seed("train", "seed", 1);

  std::string dir = config.get_string("output", "dir", "");
  if (dir.empty()) throw ConfigError("output.dir is required for sample");
  ensure_dir(dir);
  echo_config(config, dir, "config.sample");

  Rng rng(seed);
  SetDataset samples;
  for (std::size_t i = 0; i < count; ++i) {
    SetBatch one = model.sample(points, rng);
    samples.sets.push_back(one.values.reshaped({points, model.config().dim}));
  }
  json meta = {{"generator", "model_sample"},
               {"checkpoint", checkpoint},
               {"count", count},
               {"points", points},
               {"seed", seed}};
  samples.metadata_json = meta.dump();
  samples.validate();

  write_fset(samples, dir + "/samples.fset");
  std::printf("wrote %zu sets of %zu points to %s/samples.fset\n", count, points, dir.c_str());
  if (config.get_flag("output", "csv", false)) {
    write_csv(samples, dir + "/samples.csv");
  }
  if (config.get_flag("output", "svg", false)) {
    if (model.config().dim != 2) {
      throw ConfigError("output.svg needs 2-d points");
    }
    write_svg(dir + "/samples.svg", samples);
  }
  return 0;
}

int cmd_verify(const IniConfig& config) {
  double bias = config.get_number("verify", "break_eq_logdet", 0.0);
  testing::eq_linear_logdet_offset = bias;
  std::string scope = config.get_string("verify", "scope", "all");
  std::vector<verify::CheckResult> results;
  try {
    results = verify::run_checks(scope);
  } catch (...) {
    testing::eq_linear_logdet_offset = 0.0;
    throw;
  }
  testing::eq_linear_logdet_offset = 0.0;

  std::size_t passed = 0;
  for (const auto& result : results) {
    std::printf("%s %s (%.1f ms)%s%s\n", result.passed ? "PASS" : "FAIL", result.name.c_str(),
                result.ms, result.detail.empty() ? "" : ": ", result.detail.c_str());
    if (result.passed) ++passed;
  }
  std::printf("%zu/%zu checks passed\n", passed, results.size());
  return passed == results.size() ? 0 : 4;
}

}  // namespace

int run(int argc, const char* const* argv) {
  try {
    Args args = parse_args(argc, argv);
    if (args.help) {
      std::fputs(kUsage, stdout);
      return 0;
    }
    if (args.command.empty()) {
      std::fputs(kUsage, stderr);
      return 1;
    }
    if (args.command != "train" && args.command != "eval" && args.command != "sample" &&
        args.command != "verify") {
      throw UsageError("unknown command '" + args.command + "'");
    }
    if (args.config_path.empty() && args.command != "verify") {
      throw UsageError("--config PATH is required for " + args.command);
    }
    IniConfig config = args.config_path.empty() ? IniConfig()
                                                : IniConfig::parse_file(args.config_path);
    if (const char* env_seed = std::getenv("FLOWSCAN_SEED")) {
      config.set("train", "seed", env_seed);
    }
    for (const auto& [section, key, value] : args.overrides) {
      config.set(section, key, value);
    }
    if (args.command == "train") return cmd_train(config);
    if (args.command == "eval") return cmd_eval(config);
    if (args.command == "sample") return cmd_sample(config);
    return cmd_verify(config);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n\n%s", e.what(), kUsage);
    return 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const TractabilityError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace cli
}  // namespace flowscan
