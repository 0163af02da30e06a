#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "flowscan/datasets.hpp"
#include "flowscan/model.hpp"

namespace flowscan {

struct TrainConfig {
  std::size_t iterations = 5000;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  // Metrics cadence in optimizer steps. A row is also logged before the
  // first step and after the last one.
  std::size_t eval_interval = 100;
  // Consecutive logged rows without a validation improvement before
  // stopping. 0 disables early stopping.
  std::size_t patience = 0;
  // Global gradient L2 ceiling. 0 disables clipping.
  double clip_norm = 10.0;
  // Sets scored per split when logging metrics. 0 scores the whole split.
  std::size_t eval_cap = 0;

  void validate() const;
};

struct MetricsRow {
  std::size_t step;
  double train_ppll;
  double val_ppll;
  double wall_ms;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  double best_val_ppll;
  std::size_t best_step;
  std::size_t steps_run;
  bool nan_abort;
  bool early_stopped;
};

// Mean per-point log-likelihood over the first `cap` sets (0 = all),
// computed without building gradient graphs.
double mean_ppll(const FlowScanModel& model, const SetDataset& data, std::size_t cap = 0);

struct PpllReport {
  double mean_ppll;
  double std_error;  // sample sd of per-set PPLL over sqrt(count), 0 for one set
  std::size_t n_sets;
};

PpllReport ppll_report(const FlowScanModel& model, const SetDataset& data);

// Maximum-likelihood training: Adam on the mean negative PPLL of batches
// drawn from `train_split` (sets of equal cardinality per batch). Logs
// metrics rows, tracks the best validation PPLL, and calls `on_best` while
// the model holds the improved parameters. A non-finite loss or metrics row
// aborts and restores the parameters from the last finite metrics row.
TrainResult fit(FlowScanModel& model, const SetDataset& train_split, const SetDataset& val_split,
                const TrainConfig& config,
                const std::function<void(const MetricsRow&)>& on_metrics = {},
                const std::function<void(const FlowScanModel&)>& on_best = {});

}  // namespace flowscan
