#pragma once

// Experiment configuration: flat `key=value` files, command-line overrides,
// benchmark defaults keyed by dataset name, and a resolved echo that parses
// back to the same configuration.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "psformer/dataset.hpp"
#include "psformer/model.hpp"
#include "psformer/trainer.hpp"

namespace psformer {

/// Hyperparameters the benchmark configuration fixes per dataset.
struct BenchmarkDefaults {
  std::size_t encoders = 1;
  std::size_t batch_size = 16;
  std::size_t revin_window = 0;  // 0 = full look-back
  double rho = 0.0;
  bool known = false;
};

/// Canonical dataset name ("ETTh1", "Weather", ...) from a free-form name or
/// file stem; empty when unrecognized.
std::string canonical_dataset_name(std::string_view name);

/// Defaults for a dataset and horizon. Unknown datasets get the generic
/// settings (1 encoder, batch 16, full RevIN window, rho 0).
BenchmarkDefaults benchmark_defaults(std::string_view dataset, std::size_t horizon);

/// Neighborhood size used for a benchmark task, if tabulated.
std::optional<double> tabulated_rho(std::string_view dataset, std::size_t horizon);

enum class SplitMode { Auto, EttHourly, EttMinute, Ratio, Counts };

struct ExperimentConfig {
  std::filesystem::path dataset;
  std::string name;  // canonical or user-provided dataset name
  SplitMode split = SplitMode::Auto;
  double train_ratio = 0.7;
  double val_ratio = 0.1;
  double test_ratio = 0.2;
  std::size_t train_count = 0;
  std::size_t val_count = 0;
  std::size_t test_count = 0;
  ModelConfig model;  // channels filled from the dataset at load time
  TrainConfig train;
  std::filesystem::path out = "out";

  /// SplitSpec for this config (Auto picks ETT presets by name, else ratios).
  SplitSpec split_spec() const;
};

using KeyValues = std::map<std::string, std::string>;

/// Every key accepted in config files and as overrides.
const std::vector<std::string>& config_keys();

/// Parses `key=value` lines; '#' starts a comment. Unknown keys are rejected.
KeyValues parse_key_values(std::string_view text, const std::string& source = "<config>");
KeyValues read_config_file(const std::filesystem::path& path);

/// Builds a config from key/values, filling benchmark defaults for anything
/// omitted. `model.channels` stays 0 until a dataset is loaded.
ExperimentConfig resolve_config(const KeyValues& kv);

/// Fully explicit key/value form; resolve_config(to_key_values(c)) == c.
KeyValues to_key_values(const ExperimentConfig& cfg);
std::string format_key_values(const KeyValues& kv);

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

std::string to_string(SplitMode m);

}  // namespace psformer
