#include "flowscan/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "flowscan/errors.hpp"

namespace flowscan {

namespace {

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> table = {
      {"data",
       {"path", "generator", "count", "points", "seed", "noise", "radius_min", "radius_max",
        "center_box", "train_frac", "val_frac", "test_frac", "split_seed"}},
      {"model",
       {"checkpoint", "dim", "cardinality", "equivariant", "correspondence_depth",
        "recurrent_coupling", "sort_key", "hidden", "mixture", "layers", "coupling_hidden",
        "embed_dim", "base", "init_seed"}},
      {"train",
       {"iterations", "batch", "lr", "seed", "eval_interval", "patience", "clip_norm",
        "checkpoint_interval", "eval_cap"}},
      {"output", {"dir", "csv", "svg"}},
      {"verify", {"scope", "break_eq_logdet"}},
  };
  return table;
}

void check_known(const std::string& section, const std::string& key, const std::string& origin) {
  auto sec = known_keys().find(section);
  if (sec == known_keys().end()) {
    throw ConfigError(origin + ": unknown section [" + section + "]");
  }
  if (!sec->second.count(key)) {
    throw ConfigError(origin + ": unknown key '" + key + "' in section [" + section + "]");
  }
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string spot(const std::string& section, const std::string& key) {
  return section + "." + key;
}

}  // namespace

IniConfig IniConfig::parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read config file '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_text(buffer.str(), path);
}

IniConfig IniConfig::parse_text(const std::string& text, const std::string& origin) {
  IniConfig config;
  config.text_ = text;
  std::istringstream lines(text);
  std::string line;
  std::string section;
  std::size_t number = 0;
  while (std::getline(lines, line)) {
    ++number;
    std::string body = trim(line);
    if (body.empty() || body[0] == '#') continue;
    std::string where = origin + ":" + std::to_string(number);
    if (body.front() == '[') {
      if (body.back() != ']' || body.size() < 3) {
        throw ConfigError(where + ": malformed section header '" + body + "'");
      }
      section = trim(body.substr(1, body.size() - 2));
      if (known_keys().find(section) == known_keys().end()) {
        throw ConfigError(where + ": unknown section [" + section + "]");
      }
      continue;
    }
    std::size_t eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where + ": expected 'key = value', got '" + body + "'");
    }
    if (section.empty()) {
      throw ConfigError(where + ": key before any [section] header");
    }
    std::string key = trim(body.substr(0, eq));
    std::string value = trim(body.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    check_known(section, key, where);
    config.values_[section][key] = value;
  }
  return config;
}

void IniConfig::set(const std::string& section, const std::string& key,
                    const std::string& value) {
  check_known(section, key, "override");
  values_[section][key] = value;
  overrides_.push_back(section + "." + key + " = " + value);
}

bool IniConfig::has(const std::string& section, const std::string& key) const {
  auto sec = values_.find(section);
  return sec != values_.end() && sec->second.count(key) > 0;
}

std::string IniConfig::get_string(const std::string& section, const std::string& key,
                                  const std::string& fallback) const {
  auto sec = values_.find(section);
  if (sec == values_.end()) return fallback;
  auto it = sec->second.find(key);
  return it == sec->second.end() ? fallback : it->second;
}

double IniConfig::get_number(const std::string& section, const std::string& key,
                             double fallback) const {
  if (!has(section, key)) return fallback;
  const std::string raw = get_string(section, key, "");
  try {
    std::size_t used = 0;
    double value = std::stod(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    return value;
  } catch (const std::exception&) {
    throw ConfigError(spot(section, key) + ": '" + raw + "' is not a number");
  }
}

std::size_t IniConfig::get_count(const std::string& section, const std::string& key,
                                 std::size_t fallback) const {
  if (!has(section, key)) return fallback;
  const std::string raw = get_string(section, key, "");
  if (raw.empty() || raw.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(spot(section, key) + ": '" + raw + "' is not a nonnegative integer");
  }
  errno = 0;
  unsigned long long value = std::strtoull(raw.c_str(), nullptr, 10);
  if (errno == ERANGE) {
    throw ConfigError(spot(section, key) + ": '" + raw + "' is out of range");
  }
  return static_cast<std::size_t>(value);
}

std::uint64_t IniConfig::get_seed(const std::string& section, const std::string& key,
                                  std::uint64_t fallback) const {
  if (!has(section, key)) return fallback;
  return static_cast<std::uint64_t>(get_count(section, key, 0));
}

bool IniConfig::get_flag(const std::string& section, const std::string& key,
                         bool fallback) const {
  if (!has(section, key)) return fallback;
  std::string raw = get_string(section, key, "");
  std::transform(raw.begin(), raw.end(), raw.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (raw == "true" || raw == "1" || raw == "yes" || raw == "on") return true;
  if (raw == "false" || raw == "0" || raw == "no" || raw == "off") return false;
  throw ConfigError(spot(section, key) + ": '" + raw + "' is not a boolean");
}

DataSpec DataSpec::from(const IniConfig& config) {
  DataSpec spec;
  spec.path = config.get_string("data", "path", "");
  spec.generator = config.get_string("data", "generator", "");
  if (!spec.path.empty() && !spec.generator.empty()) {
    throw ConfigError("data: give either path or generator, not both");
  }
  if (spec.path.empty() && spec.generator.empty()) {
    throw ConfigError("data: either path or generator is required");
  }
  spec.count = config.get_count("data", "count", spec.count);
  spec.points = config.get_count("data", "points", spec.points);
  spec.seed = config.get_seed("data", "seed", spec.seed);
  spec.noise = config.get_number("data", "noise", spec.noise);
  spec.radius_min = config.get_number("data", "radius_min", spec.radius_min);
  spec.radius_max = config.get_number("data", "radius_max", spec.radius_max);
  spec.center_box = config.get_number("data", "center_box", spec.center_box);
  spec.train_frac = config.get_number("data", "train_frac", spec.train_frac);
  spec.val_frac = config.get_number("data", "val_frac", spec.val_frac);
  spec.test_frac = config.get_number("data", "test_frac", spec.test_frac);
  spec.split_seed = config.get_seed("data", "split_seed", spec.split_seed);
  if (spec.count == 0) throw ConfigError("data.count must be positive");
  if (spec.points == 0) throw ConfigError("data.points must be positive");
  if (spec.noise < 0.0) throw ConfigError("data.noise must be nonnegative");
  return spec;
}

SetDataset realize_dataset(const DataSpec& spec) {
  SetDataset dataset;
  if (!spec.path.empty()) {
    if (spec.path.size() >= 4 && spec.path.substr(spec.path.size() - 4) == ".csv") {
      dataset = read_csv(spec.path);
    } else {
      dataset = read_fset(spec.path);
    }
  } else if (spec.generator == "sinusoid") {
    dataset = gen_sinusoid(spec.count, spec.points, spec.seed, spec.noise);
  } else if (spec.generator == "circles" || spec.generator == "squares") {
    CloudShape shape = spec.generator == "circles" ? CloudShape::Circle : CloudShape::Square;
    dataset = gen_shape_clouds(spec.count, spec.points, shape, spec.radius_min, spec.radius_max,
                               spec.noise, spec.seed, spec.center_box);
  } else {
    throw ConfigError("data.generator: unknown generator '" + spec.generator +
                      "' (use sinusoid|circles|squares)");
  }
  if (dataset.splits.empty()) {
    dataset = split(dataset, spec.train_frac, spec.val_frac, spec.test_frac, spec.split_seed);
  }
  return dataset;
}

FlowScanConfig model_config_from(const IniConfig& config, std::size_t data_dim,
                                 std::size_t data_cardinality) {
  std::size_t dim = config.get_count("model", "dim", data_dim);
  if (dim == 0) throw ConfigError("model.dim is required when no dataset fixes it");
  FlowScanConfig model = FlowScanConfig::defaults(dim);

  if (config.has("model", "equivariant")) {
    model.equivariant.clear();
    std::string raw = config.get_string("model", "equivariant", "");
    std::istringstream items(raw);
    std::string item;
    while (std::getline(items, item, ',')) {
      std::string body = item;
      std::size_t b = body.find_first_not_of(" \t");
      std::size_t e = body.find_last_not_of(" \t");
      if (b == std::string::npos) continue;
      body = body.substr(b, e - b + 1);
      if (body == "none") continue;
      model.equivariant.push_back(body);
    }
  }
  model.cardinality = config.get_count("model", "cardinality", model.cardinality);
  model.correspondence_depth =
      config.get_count("model", "correspondence_depth", model.correspondence_depth);
  model.recurrent_coupling =
      config.get_flag("model", "recurrent_coupling", model.recurrent_coupling);
  model.sort_key = config.get_count("model", "sort_key", model.sort_key);
  model.hidden = config.get_count("model", "hidden", model.hidden);
  model.mixture = config.get_count("model", "mixture", model.mixture);
  model.layers = config.get_count("model", "layers", model.layers);
  model.coupling_hidden = config.get_count("model", "coupling_hidden", model.coupling_hidden);
  model.embed_dim = config.get_count("model", "embed_dim", model.embed_dim);
  model.init_seed = config.get_seed("model", "init_seed", model.init_seed);

  std::string base = config.get_string("model", "base", "scan");
  if (base == "scan") {
    model.base = BaseKind::Scan;
  } else if (base == "iid") {
    model.base = BaseKind::Iid;
    // The per-point baseline takes no set-level machinery; drop the default
    // stack unless the config asked for one explicitly (then validation
    // rejects the combination).
    if (!config.has("model", "equivariant")) model.equivariant.clear();
    if (!config.has("model", "correspondence_depth")) model.correspondence_depth = 0;
    if (!config.has("model", "recurrent_coupling")) model.recurrent_coupling = false;
  } else if (base == "flat") {
    model.base = BaseKind::Flat;
    if (model.cardinality == 0) model.cardinality = data_cardinality;
  } else {
    throw ConfigError("model.base: unknown base '" + base + "' (use scan|iid|flat)");
  }
  model.validate();
  return model;
}

TrainConfig train_config_from(const IniConfig& config) {
  TrainConfig train;
  train.iterations = config.get_count("train", "iterations", train.iterations);
  train.batch_size = config.get_count("train", "batch", train.batch_size);
  train.learning_rate = config.get_number("train", "lr", train.learning_rate);
  train.seed = config.get_seed("train", "seed", train.seed);
  train.eval_interval = config.get_count("train", "eval_interval", train.eval_interval);
  train.patience = config.get_count("train", "patience", train.patience);
  train.clip_norm = config.get_number("train", "clip_norm", train.clip_norm);
  train.eval_cap = config.get_count("train", "eval_cap", train.eval_cap);
  train.validate();
  return train;
}

}  // namespace flowscan
