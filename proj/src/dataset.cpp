#include "psformer/dataset.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace psformer {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == ',' && !quoted) {
      out.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  out.push_back(trim(line.substr(start)));
  return out;
}

bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  std::string buf(s);
  char* end = nullptr;
  errno = 0;
  out = std::strtod(buf.c_str(), &end);
  return end == buf.c_str() + buf.size() && errno != ERANGE && std::isfinite(out);
}

}  // namespace

RawSeries parse_csv(std::string_view text, const std::string& source) {
  RawSeries raw;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  bool have_header = false;
  std::size_t columns = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (trim(line).empty()) {
      if (pos > text.size()) break;
      continue;
    }
    auto fields = split_fields(line);
    if (!have_header) {
      if (fields.size() < 2)
        throw DataError(source + ": need a timestamp column and at least one value column");
      columns = fields.size();
      for (std::size_t c = 1; c < fields.size(); ++c) raw.channel_names.emplace_back(fields[c]);
      raw.channels = columns - 1;
      have_header = true;
      continue;
    }
    const std::size_t row = raw.length + 1;
    if (fields.size() != columns)
      throw DataError(source + ": row " + std::to_string(row) + " (line " +
                      std::to_string(line_no) + ") has " + std::to_string(fields.size()) +
                      " cells, expected " + std::to_string(columns));
    raw.timestamps.emplace_back(fields[0]);
    for (std::size_t c = 1; c < columns; ++c) {
      double v = 0.0;
      if (!parse_double(fields[c], v))
        throw DataError(source + ": row " + std::to_string(row) + " (line " +
                        std::to_string(line_no) + "), column '" + raw.channel_names[c - 1] +
                        "': " + (fields[c].empty() ? std::string("empty cell")
                                                   : "non-numeric value '" + std::string(fields[c]) + "'"));
      raw.values.push_back(v);
    }
    ++raw.length;
  }
  if (!have_header) throw DataError(source + ": empty file");
  return raw;
}

RawSeries load_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read dataset file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), path.string());
}

SplitSpec SplitSpec::fractions(double train, double val, double test) {
  SplitSpec s;
  s.mode = Mode::Fractions;
  s.train_fraction = train;
  s.val_fraction = val;
  s.test_fraction = test;
  return s;
}

SplitSpec SplitSpec::counts(std::size_t train, std::size_t val, std::size_t test) {
  SplitSpec s;
  s.mode = Mode::Counts;
  s.train_count = train;
  s.val_count = val;
  s.test_count = test;
  return s;
}

SplitSpec SplitSpec::ett_hourly() { return counts(12 * 30 * 24, 4 * 30 * 24, 4 * 30 * 24); }
SplitSpec SplitSpec::ett_minute() {
  return counts(12 * 30 * 24 * 4, 4 * 30 * 24 * 4, 4 * 30 * 24 * 4);
}

const char* region_name(Region r) {
  switch (r) {
    case Region::Train: return "train";
    case Region::Val: return "val";
    case Region::Test: return "test";
  }
  return "?";
}

WindowedDataset::WindowedDataset(const RawSeries& raw, const SplitSpec& spec,
                                 std::size_t lookback, std::size_t horizon)
    : channels_(raw.channels), lookback_(lookback), horizon_(horizon), names_(raw.channel_names) {
  if (raw.channels < 1) throw DataError("dataset has no value columns");
  if (lookback == 0) throw DataError("look-back window must be positive");
  if (raw.length <= lookback + horizon)
    throw DataError("series of length " + std::to_string(raw.length) +
                    " is too short for look-back " + std::to_string(lookback) + " + horizon " +
                    std::to_string(horizon));

  std::size_t n_train = 0, n_val = 0, n_test = 0;
  if (spec.mode == SplitSpec::Mode::Fractions) {
    const double total = spec.train_fraction + spec.val_fraction + spec.test_fraction;
    if (std::abs(total - 1.0) > 1e-9 || spec.train_fraction <= 0 || spec.val_fraction < 0 ||
        spec.test_fraction < 0)
      throw DataError("split fractions must be non-negative and sum to 1");
    const auto len = static_cast<double>(raw.length);
    n_train = static_cast<std::size_t>(len * spec.train_fraction + 1e-9);
    n_test = static_cast<std::size_t>(len * spec.test_fraction + 1e-9);
    n_val = raw.length - n_train - n_test;
  } else {
    n_train = spec.train_count;
    n_val = spec.val_count;
    n_test = spec.test_count;
    if (n_train + n_val + n_test > raw.length)
      throw DataError("split counts " + std::to_string(n_train) + "/" + std::to_string(n_val) +
                      "/" + std::to_string(n_test) + " exceed series length " +
                      std::to_string(raw.length));
  }
  const std::size_t overlap = spec.boundary_overlap.value_or(lookback);
  if (overlap > n_train || overlap > n_train + n_val)
    throw DataError("boundary overlap " + std::to_string(overlap) +
                    " is longer than the preceding region");

  regions_[0] = {0, n_train};
  regions_[1] = {n_train - overlap, n_train + n_val};
  regions_[2] = {n_train + n_val - overlap, n_train + n_val + n_test};
  for (Region r : {Region::Train, Region::Val, Region::Test})
    if (window_count(r) == 0)
      throw DataError(std::string(region_name(r)) + " region of length " +
                      std::to_string(bounds(r).length()) + " is too short for one window (L=" +
                      std::to_string(lookback) + ", F=" + std::to_string(horizon) + ")");

  mean_.assign(channels_, 0.0);
  std_.assign(channels_, 0.0);
  for (std::size_t m = 0; m < channels_; ++m) {
    double s = 0.0;
    for (std::size_t t = 0; t < n_train; ++t) s += raw.at(t, m);
    const double mu = s / static_cast<double>(n_train);
    double ss = 0.0;
    for (std::size_t t = 0; t < n_train; ++t) {
      const double d = raw.at(t, m) - mu;
      ss += d * d;
    }
    double sd = std::sqrt(ss / static_cast<double>(n_train));
    if (sd < 1e-8) {
      sd = 1.0;
      floored_.push_back(m);
    }
    mean_[m] = mu;
    std_[m] = sd;
  }

  const std::size_t used = regions_[2].end;
  data_.resize(used * channels_);
  for (std::size_t t = 0; t < used; ++t)
    for (std::size_t m = 0; m < channels_; ++m)
      data_[t * channels_ + m] = (raw.at(t, m) - mean_[m]) / std_[m];
}

const RegionBounds& WindowedDataset::bounds(Region r) const {
  return regions_[static_cast<int>(r)];
}

std::size_t WindowedDataset::window_count(Region r) const {
  return windows_in(bounds(r).length(), lookback_, horizon_);
}

std::size_t WindowedDataset::window_start(Region r, std::size_t i) const {
  if (i >= window_count(r))
    throw DataError("window " + std::to_string(i) + " out of range for " + region_name(r) +
                    " region with " + std::to_string(window_count(r)) + " windows");
  return bounds(r).begin + i;
}

template <typename T>
void WindowedDataset::copy_window(Region r, std::size_t i, T* input, T* target) const {
  const std::size_t start = window_start(r, i);
  for (std::size_t m = 0; m < channels_; ++m) {
    for (std::size_t t = 0; t < lookback_; ++t)
      input[m * lookback_ + t] = static_cast<T>(value(start + t, m));
    for (std::size_t t = 0; t < horizon_; ++t)
      target[m * horizon_ + t] = static_cast<T>(value(start + lookback_ + t, m));
  }
}

WindowedDataset split_and_standardize(const RawSeries& raw, const SplitSpec& spec,
                                      std::size_t lookback, std::size_t horizon) {
  return WindowedDataset(raw, spec, lookback, horizon);
}

template <typename T>
BatchIterator<T>::BatchIterator(const WindowedDataset& ds, Region region, std::size_t batch_size,
                                bool shuffle, bool drop_last, std::uint64_t seed)
    : ds_(&ds), region_(region), batch_size_(batch_size), shuffle_(shuffle),
      drop_last_(drop_last), rng_(seed) {
  if (batch_size == 0) throw DataError("batch size must be positive");
  order_.resize(ds.window_count(region));
  reset();
}

template <typename T>
void BatchIterator<T>::reset() {
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  if (shuffle_) {
    // Explicit Fisher-Yates keeps the order identical across standard libraries.
    for (std::size_t i = order_.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng_() % i);
      std::swap(order_[i - 1], order_[j]);
    }
  }
  cursor_ = 0;
}

template <typename T>
std::size_t BatchIterator<T>::batch_count() const {
  const std::size_t n = order_.size();
  return drop_last_ ? n / batch_size_ : (n + batch_size_ - 1) / batch_size_;
}

template <typename T>
bool BatchIterator<T>::next(Batch<T>& out) {
  const std::size_t remaining = order_.size() - cursor_;
  if (remaining == 0 || (drop_last_ && remaining < batch_size_)) return false;
  const std::size_t n = std::min(batch_size_, remaining);
  const std::size_t M = ds_->channels(), L = ds_->lookback(), F = ds_->horizon();
  out.size = n;
  out.channels = M;
  out.lookback = L;
  out.horizon = F;
  out.input.resize(n * M * L);
  out.target.resize(n * M * F);
  out.window_index.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                          order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + n));
  for (std::size_t b = 0; b < n; ++b)
    ds_->copy_window(region_, out.window_index[b], out.input.data() + b * M * L,
                     out.target.data() + b * M * F);
  cursor_ += n;
  return true;
}

template <typename T>
std::vector<Batch<T>> iterate_batches(const WindowedDataset& ds, Region region,
                                      std::size_t batch_size, bool shuffle, bool drop_last,
                                      std::uint64_t seed) {
  BatchIterator<T> it(ds, region, batch_size, shuffle, drop_last, seed);
  std::vector<Batch<T>> out;
  Batch<T> b;
  while (it.next(b)) out.push_back(b);
  return out;
}

template void WindowedDataset::copy_window<float>(Region, std::size_t, float*, float*) const;
template void WindowedDataset::copy_window<double>(Region, std::size_t, double*, double*) const;
template class BatchIterator<float>;
template class BatchIterator<double>;
template std::vector<Batch<float>> iterate_batches(const WindowedDataset&, Region, std::size_t,
                                                   bool, bool, std::uint64_t);
template std::vector<Batch<double>> iterate_batches(const WindowedDataset&, Region, std::size_t,
                                                    bool, bool, std::uint64_t);

}  // namespace psformer
