#pragma once

// CSV ingestion, chronological splitting, channel standardization and
// sliding-window batching.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace psformer {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// T_total × M values, row-major by time step.
struct RawSeries {
  std::vector<std::string> channel_names;
  std::vector<std::string> timestamps;
  std::vector<double> values;
  std::size_t length = 0;
  std::size_t channels = 0;

  double at(std::size_t t, std::size_t m) const { return values[t * channels + m]; }
};

/// Parses a header row followed by one row per time step. The first column
/// is a timestamp or index and is kept as text; the rest must be numeric.
RawSeries load_csv(const std::filesystem::path& path);
RawSeries parse_csv(std::string_view text, const std::string& source = "<memory>");

/// How the series is cut into train / validation / test regions.
struct SplitSpec {
  enum class Mode { Fractions, Counts };
  Mode mode = Mode::Fractions;
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  std::size_t train_count = 0;
  std::size_t val_count = 0;
  std::size_t test_count = 0;
  /// Look-back points prepended to val and test; defaults to L when unset.
  std::optional<std::size_t> boundary_overlap;

  static SplitSpec fractions(double train, double val, double test);
  static SplitSpec counts(std::size_t train, std::size_t val, std::size_t test);
  /// 12/4/4 months of hourly points (8640/2880/2880).
  static SplitSpec ett_hourly();
  /// 12/4/4 months of 15-minute points (34560/11520/11520).
  static SplitSpec ett_minute();
};

enum class Region { Train, Val, Test };
const char* region_name(Region r);

/// Half-open point range [begin, end) into the standardized series.
struct RegionBounds {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const { return end - begin; }
};

/// Standardized series with region bounds and window geometry. Immutable
/// after construction.
class WindowedDataset {
 public:
  WindowedDataset(const RawSeries& raw, const SplitSpec& spec, std::size_t lookback,
                  std::size_t horizon);

  std::size_t channels() const { return channels_; }
  std::size_t lookback() const { return lookback_; }
  std::size_t horizon() const { return horizon_; }
  const std::vector<std::string>& channel_names() const { return names_; }

  const RegionBounds& bounds(Region r) const;
  std::size_t window_count(Region r) const;

  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& stddev() const { return std_; }
  /// Channels whose train std fell below 1e-8 and were divided by 1 instead.
  const std::vector<std::size_t>& floored_channels() const { return floored_; }

  /// Standardized value at absolute time step t.
  double value(std::size_t t, std::size_t m) const { return data_[t * channels_ + m]; }
  double destandardize(double v, std::size_t m) const { return v * std_[m] + mean_[m]; }

  /// Absolute time step of the first input point of window `i` in `r`.
  std::size_t window_start(Region r, std::size_t i) const;

  /// Copies window `i` of `r` into channel-major buffers (M×L and M×F).
  template <typename T>
  void copy_window(Region r, std::size_t i, T* input, T* target) const;

 private:
  std::size_t channels_;
  std::size_t lookback_;
  std::size_t horizon_;
  std::vector<std::string> names_;
  std::vector<double> data_;
  std::vector<double> mean_;
  std::vector<double> std_;
  std::vector<std::size_t> floored_;
  RegionBounds regions_[3];
};

/// Convenience wrapper: equivalent to constructing a WindowedDataset.
WindowedDataset split_and_standardize(const RawSeries& raw, const SplitSpec& spec,
                                      std::size_t lookback, std::size_t horizon);

/// Number of stride-1 windows of total length L+F in a region of `length`.
constexpr std::size_t windows_in(std::size_t length, std::size_t lookback, std::size_t horizon) {
  return length >= lookback + horizon ? length - lookback - horizon + 1 : 0;
}

template <typename T>
struct Batch {
  std::size_t size = 0;
  std::size_t channels = 0;
  std::size_t lookback = 0;
  std::size_t horizon = 0;
  std::vector<T> input;   // size × M × L
  std::vector<T> target;  // size × M × F
  std::vector<std::size_t> window_index;
};

/// Iterates windows of one region in batches. Train-style iteration shuffles
/// with a seeded generator; the final short batch is dropped or kept per
/// `drop_last`.
template <typename T>
class BatchIterator {
 public:
  BatchIterator(const WindowedDataset& ds, Region region, std::size_t batch_size, bool shuffle,
                bool drop_last, std::uint64_t seed = 1);

  /// Fills `out` with the next batch; false once the epoch is exhausted.
  bool next(Batch<T>& out);
  /// Starts a new epoch (reshuffling when enabled).
  void reset();

  std::size_t batch_count() const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const WindowedDataset* ds_;
  Region region_;
  std::size_t batch_size_;
  bool shuffle_;
  bool drop_last_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// All batches of one epoch, for callers that prefer a container.
template <typename T>
std::vector<Batch<T>> iterate_batches(const WindowedDataset& ds, Region region,
                                      std::size_t batch_size, bool shuffle, bool drop_last,
                                      std::uint64_t seed = 1);

}  // namespace psformer
