#include "flowscan/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "flowscan/errors.hpp"

namespace flowscan {

namespace ad = autodiff;

void TrainConfig::validate() const {
  if (iterations == 0) throw ConfigError("iterations must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (eval_interval == 0) throw ConfigError("eval interval must be positive");
  if (clip_norm < 0.0) throw ConfigError("clip norm must be nonnegative");
}

namespace {

constexpr std::size_t kScoreChunk = 64;

// Batches must stack, so indices are bucketed by cardinality.
std::vector<std::pair<std::size_t, std::vector<std::size_t>>> group_by_cardinality(
    const SetDataset& data, std::size_t limit) {
  std::map<std::size_t, std::vector<std::size_t>> buckets;
  const std::size_t count = limit == 0 ? data.size() : std::min(limit, data.size());
  for (std::size_t i = 0; i < count; ++i) buckets[data.sets[i].extent(0)].push_back(i);
  return {buckets.begin(), buckets.end()};
}

std::map<std::string, Tensor> take_snapshot(const ParamStore& store) {
  std::map<std::string, Tensor> values;
  for (const auto& [name, var] : store.params()) values.emplace(name, var->value);
  return values;
}

void restore_snapshot(ParamStore& store, const std::map<std::string, Tensor>& snapshot) {
  for (const auto& [name, value] : snapshot) store.get(name)->value = value;
}

}  // namespace

double mean_ppll(const FlowScanModel& model, const SetDataset& data, std::size_t cap) {
  if (data.size() == 0) throw DataError("cannot score an empty dataset");
  auto groups = group_by_cardinality(data, cap);
  double total = 0.0;
  std::size_t scored = 0;
  for (const auto& [n, indices] : groups) {
    (void)n;
    for (std::size_t start = 0; start < indices.size(); start += kScoreChunk) {
      std::size_t stop = std::min(indices.size(), start + kScoreChunk);
      std::vector<std::size_t> chunk(indices.begin() + start, indices.begin() + stop);
      Tensor values = model.ppll(stack_sets(data, chunk));
      for (std::size_t i = 0; i < values.numel(); ++i) total += values[i];
      scored += chunk.size();
    }
  }
  return total / static_cast<double>(scored);
}

PpllReport ppll_report(const FlowScanModel& model, const SetDataset& data) {
  if (data.size() == 0) throw DataError("cannot score an empty dataset");
  std::vector<double> per_set;
  per_set.reserve(data.size());
  auto groups = group_by_cardinality(data, 0);
  for (const auto& [n, indices] : groups) {
    (void)n;
    for (std::size_t start = 0; start < indices.size(); start += kScoreChunk) {
      std::size_t stop = std::min(indices.size(), start + kScoreChunk);
      std::vector<std::size_t> chunk(indices.begin() + start, indices.begin() + stop);
      Tensor values = model.ppll(stack_sets(data, chunk));
      for (std::size_t i = 0; i < values.numel(); ++i) per_set.push_back(values[i]);
    }
  }
  PpllReport report;
  report.n_sets = per_set.size();
  double total = 0.0;
  for (double v : per_set) total += v;
  report.mean_ppll = total / static_cast<double>(per_set.size());
  double ss = 0.0;
  for (double v : per_set) ss += (v - report.mean_ppll) * (v - report.mean_ppll);
  report.std_error = per_set.size() > 1
                         ? std::sqrt(ss / static_cast<double>(per_set.size() - 1)) /
                               std::sqrt(static_cast<double>(per_set.size()))
                         : 0.0;
  return report;
}

TrainResult fit(FlowScanModel& model, const SetDataset& train_split, const SetDataset& val_split,
                const TrainConfig& config,
                const std::function<void(const MetricsRow&)>& on_metrics,
                const std::function<void(const FlowScanModel&)>& on_best) {
  config.validate();
  if (train_split.size() == 0) throw DataError("training split is empty");
  if (val_split.size() == 0) throw DataError("validation split is empty");
  train_split.validate();
  val_split.validate();

  Rng rng(config.seed);
  AdamConfig adam;
  adam.lr = config.learning_rate;

  auto groups = group_by_cardinality(train_split, 0);
  const std::size_t train_count = train_split.size();

  auto draw_batch = [&]() {
    std::size_t pick = rng.uniform_int(train_count);
    std::size_t g = 0;
    while (pick >= groups[g].second.size()) {
      pick -= groups[g].second.size();
      ++g;
    }
    const auto& pool = groups[g].second;
    std::vector<std::size_t> indices(config.batch_size);
    for (auto& idx : indices) idx = pool[rng.uniform_int(pool.size())];
    return stack_sets(train_split, indices);
  };

  TrainResult result;
  result.best_val_ppll = -std::numeric_limits<double>::infinity();
  result.best_step = 0;
  result.steps_run = 0;
  result.nan_abort = false;
  result.early_stopped = false;

  auto t0 = std::chrono::steady_clock::now();
  auto elapsed_ms = [&]() {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  auto snapshot = take_snapshot(model.params());
  std::size_t rounds_since_best = 0;

  // Exploded parameters surface either as a non-finite score or as an
  // overflow thrown mid-graph; both mean the same thing here.
  auto safe_mean = [&](const SetDataset& data) {
    try {
      return mean_ppll(model, data, config.eval_cap);
    } catch (const NumericError&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };

  // Returns false when either split scores non-finite; the caller aborts.
  auto log_row = [&](std::size_t step) {
    MetricsRow row;
    row.step = step;
    row.train_ppll = safe_mean(train_split);
    row.val_ppll = safe_mean(val_split);
    row.wall_ms = elapsed_ms();
    result.metrics.push_back(row);
    if (!std::isfinite(row.train_ppll) || !std::isfinite(row.val_ppll)) return false;
    if (row.val_ppll > result.best_val_ppll) {
      result.best_val_ppll = row.val_ppll;
      result.best_step = step;
      rounds_since_best = 0;
      if (on_best) on_best(model);
    } else {
      ++rounds_since_best;
    }
    snapshot = take_snapshot(model.params());
    if (on_metrics) on_metrics(row);
    return true;
  };

  if (!log_row(0)) {
    restore_snapshot(model.params(), snapshot);
    result.nan_abort = true;
    return result;
  }

  for (std::size_t it = 1; it <= config.iterations; ++it) {
    bool stepped = false;
    try {
      SetBatch batch = draw_batch();
      ad::Var x = ad::constant(batch.values);
      ad::Var loss =
          ad::neg(ad::div(ad::sum(model.ppll(x)), static_cast<double>(batch.batch_size())));
      if (std::isfinite(loss->value.item())) {
        backward(loss, model.params());
        if (config.clip_norm > 0.0) model.params().clip_grad_norm(config.clip_norm);
        model.params().adam_step(adam);
        stepped = true;
      }
    } catch (const NumericError&) {
    }
    if (!stepped) {
      restore_snapshot(model.params(), snapshot);
      result.nan_abort = true;
      return result;
    }
    model.set_step(model.step() + 1);
    result.steps_run = it;

    if (it % config.eval_interval == 0 || it == config.iterations) {
      if (!log_row(it)) {
        restore_snapshot(model.params(), snapshot);
        result.nan_abort = true;
        return result;
      }
      if (config.patience > 0 && rounds_since_best >= config.patience) {
        result.early_stopped = true;
        return result;
      }
    }
  }
  return result;
}

}  // namespace flowscan
