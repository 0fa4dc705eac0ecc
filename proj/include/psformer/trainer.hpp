#pragma once

// Training loop: SAM-wrapped Adam over shuffled train windows, per-epoch
// validation with early stopping, and test metrics on the best checkpoint.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <iosfwd>
#include <string>
#include <vector>

#include "psformer/dataset.hpp"
#include "psformer/model.hpp"
#include "psformer/optim.hpp"

namespace psformer {

struct TrainConfig {
  std::size_t max_epochs = 300;
  std::size_t patience = 30;
  std::size_t batch_size = 16;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double rho = 0.0;
  std::uint64_t seed = 1;
  int threads = 0;  // 0 keeps the OpenMP default
};

/// Element-weighted running MSE / MAE.
class MetricAccumulator {
 public:
  template <typename T>
  void add(std::span<const T> pred, std::span<const T> target);

  double mse() const { return count_ ? sq_ / static_cast<double>(count_) : 0.0; }
  double mae() const { return count_ ? abs_ / static_cast<double>(count_) : 0.0; }
  std::size_t count() const { return count_; }

 private:
  double sq_ = 0.0;
  double abs_ = 0.0;
  std::size_t count_ = 0;
};

template <typename T>
double mse(std::span<const T> pred, std::span<const T> target);
template <typename T>
double mae(std::span<const T> pred, std::span<const T> target);

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
  std::size_t windows = 0;
};

/// Metrics over every window of `region` (in order, final short batch kept).
template <typename T>
Metrics evaluate(const PSformerParams<T>& params, const ModelConfig& cfg,
                 const WindowedDataset& ds, Region region, std::size_t batch_size = 16);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;
  bool improved = false;
};

struct RunReport {
  ModelConfig model;
  TrainConfig train;
  std::vector<EpochRecord> epochs;
  std::size_t stop_epoch = 0;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool early_stopped = false;
  double test_mse = 0.0;
  double test_mae = 0.0;
  std::size_t test_windows = 0;
  ParamCount params;
  std::vector<std::size_t> floored_channels;
};

/// Writes the report as `key=value` lines (see docs/formats.md).
void write_report(std::ostream& os, const RunReport& report);
void write_report(const std::filesystem::path& path, const RunReport& report);

template <typename T>
struct TrainResult {
  RunReport report;
  PSformerParams<T> best;
};

/// Called after every epoch; useful for progress output.
using EpochCallback = std::function<void(const EpochRecord&)>;

template <typename T>
TrainResult<T> train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                     const WindowedDataset& ds, const EpochCallback& on_epoch = {});

}  // namespace psformer
