#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flowscan/datasets.hpp"
#include "flowscan/model.hpp"
#include "flowscan/train.hpp"

namespace flowscan {

// INI-style run configuration: [section] headers, `key = value` lines, and
// full-line # comments. Sections and keys are validated against the fixed
// vocabulary below, so typos fail fast instead of silently using defaults.
class IniConfig {
 public:
  IniConfig() = default;

  static IniConfig parse_file(const std::string& path);
  static IniConfig parse_text(const std::string& text, const std::string& origin);

  // Applies one override (CLI flag or environment); records it for echoing.
  void set(const std::string& section, const std::string& key, const std::string& value);

  bool has(const std::string& section, const std::string& key) const;

  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const;
  double get_number(const std::string& section, const std::string& key, double fallback) const;
  std::size_t get_count(const std::string& section, const std::string& key,
                        std::size_t fallback) const;
  std::uint64_t get_seed(const std::string& section, const std::string& key,
                         std::uint64_t fallback) const;
  bool get_flag(const std::string& section, const std::string& key, bool fallback) const;

  // Original file bytes, for the verbatim copy into the run directory.
  const std::string& raw_text() const { return text_; }
  const std::vector<std::string>& overrides() const { return overrides_; }

 private:
  std::map<std::string, std::map<std::string, std::string>> values_;
  std::string text_;
  std::vector<std::string> overrides_;
};

// Dataset source: either a file path or a named generator with parameters.
struct DataSpec {
  std::string path;
  std::string generator;
  std::size_t count = 2000;
  std::size_t points = 8;
  std::uint64_t seed = 7;
  double noise = 1.0;
  double radius_min = 0.5;
  double radius_max = 3.0;
  double center_box = 0.0;
  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;
  std::uint64_t split_seed = 99;

  static DataSpec from(const IniConfig& config);
};

// Loads or generates the dataset; assigns split labels when the source does
// not carry them.
SetDataset realize_dataset(const DataSpec& spec);

// Builds the model description from [model]; fields absent from the config
// keep the standard stack for the dimension. `data_dim` and
// `data_cardinality` fill in fields the config does not fix (0 = no hint).
FlowScanConfig model_config_from(const IniConfig& config, std::size_t data_dim,
                                 std::size_t data_cardinality = 0);

TrainConfig train_config_from(const IniConfig& config);

}  // namespace flowscan
