#include "psformer/config.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace psformer {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

struct BenchmarkRow {
  const char* name;
  std::size_t channels;
  std::size_t encoders;
  std::size_t batch_size;
  std::size_t revin_window;
  std::array<double, 4> rho;  // H = 96, 192, 336, 720
};

// Encoder counts, batch sizes and neighborhood sizes from the benchmark
// configuration; channel counts are the published dataset widths.
constexpr BenchmarkRow kBenchmarks[] = {
    {"ETTh1", 7, 1, 16, 0, {0.6, 0.8, 0.9, 0.6}},
    {"ETTh2", 7, 1, 16, 0, {0.1, 0.0, 0.6, 0.5}},
    {"ETTm1", 7, 3, 16, 0, {0.4, 0.4, 0.4, 0.4}},
    {"ETTm2", 7, 1, 16, 0, {0.0, 0.2, 0.3, 0.3}},
    {"Weather", 21, 3, 16, 0, {0.1, 0.1, 0.2, 0.3}},
    {"Electricity", 321, 3, 16, 0, {0.0, 0.1, 0.1, 0.1}},
    {"Traffic", 862, 3, 8, 0, {0.1, 0.1, 0.2, 0.3}},
    {"Exchange", 8, 1, 16, 16, {0.2, 0.1, 0.2, 0.2}},
};

const BenchmarkRow* find_benchmark(std::string_view name) {
  const std::string canon = canonical_dataset_name(name);
  for (const auto& row : kBenchmarks)
    if (canon == row.name) return &row;
  return nullptr;
}

int horizon_column(std::size_t horizon) {
  switch (horizon) {
    case 96: return 0;
    case 192: return 1;
    case 336: return 2;
    case 720: return 3;
    default: return -1;
  }
}

template <typename Int>
Int parse_uint(const std::string& key, const std::string& v) {
  Int out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || (!v.empty() && v[0] == '-'))
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

std::string fmt_real(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

SplitMode parse_split(const std::string& v) {
  const auto s = lower(v);
  if (s == "auto") return SplitMode::Auto;
  if (s == "ett_hourly" || s == "ett-hourly") return SplitMode::EttHourly;
  if (s == "ett_minute" || s == "ett-minute") return SplitMode::EttMinute;
  if (s == "ratio" || s == "fractions") return SplitMode::Ratio;
  if (s == "counts") return SplitMode::Counts;
  throw ConfigError("config key 'split': unknown mode '" + v +
                    "' (auto, ett_hourly, ett_minute, ratio, counts)");
}

}  // namespace

std::string to_string(SplitMode m) {
  switch (m) {
    case SplitMode::Auto: return "auto";
    case SplitMode::EttHourly: return "ett_hourly";
    case SplitMode::EttMinute: return "ett_minute";
    case SplitMode::Ratio: return "ratio";
    case SplitMode::Counts: return "counts";
  }
  return "?";
}

std::string canonical_dataset_name(std::string_view name) {
  const auto s = lower(name);
  if (s == "etth1") return "ETTh1";
  if (s == "etth2") return "ETTh2";
  if (s == "ettm1") return "ETTm1";
  if (s == "ettm2") return "ETTm2";
  if (s == "weather") return "Weather";
  if (s == "electricity" || s == "ecl") return "Electricity";
  if (s == "traffic") return "Traffic";
  if (s == "exchange" || s == "exchange_rate" || s == "exchange-rate") return "Exchange";
  return {};
}

BenchmarkDefaults benchmark_defaults(std::string_view dataset, std::size_t horizon) {
  BenchmarkDefaults d;
  if (const auto* row = find_benchmark(dataset)) {
    d.known = true;
    d.encoders = row->encoders;
    d.batch_size = row->batch_size;
    d.revin_window = row->revin_window;
    d.rho = tabulated_rho(dataset, horizon).value_or(0.0);
  }
  return d;
}

std::optional<double> tabulated_rho(std::string_view dataset, std::size_t horizon) {
  const auto* row = find_benchmark(dataset);
  const int col = horizon_column(horizon);
  if (!row || col < 0) return std::nullopt;
  return row->rho[static_cast<std::size_t>(col)];
}

SplitSpec ExperimentConfig::split_spec() const {
  SplitMode mode = split;
  if (mode == SplitMode::Auto) {
    const auto canon = canonical_dataset_name(name);
    if (canon == "ETTh1" || canon == "ETTh2")
      mode = SplitMode::EttHourly;
    else if (canon == "ETTm1" || canon == "ETTm2")
      mode = SplitMode::EttMinute;
    else
      mode = SplitMode::Ratio;
  }
  switch (mode) {
    case SplitMode::EttHourly: return SplitSpec::ett_hourly();
    case SplitMode::EttMinute: return SplitSpec::ett_minute();
    case SplitMode::Counts: return SplitSpec::counts(train_count, val_count, test_count);
    default: return SplitSpec::fractions(train_ratio, val_ratio, test_ratio);
  }
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "dataset",     "name",       "split",      "train_ratio", "val_ratio",  "test_ratio",
      "train_count", "val_count",  "test_count", "channels",    "lookback",   "horizon",
      "segments",    "encoders",   "sharing",    "revin_window", "lr",        "beta1",
      "beta2",       "rho",        "batch_size", "max_epochs",  "patience",   "seed",
      "threads",     "out"};
  return keys;
}

KeyValues parse_key_values(std::string_view text, const std::string& source) {
  const auto& keys = config_keys();
  KeyValues kv;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view l = line;
    if (auto hash = l.find('#'); hash != std::string_view::npos) l = l.substr(0, hash);
    l = trim(l);
    if (l.empty()) continue;
    const auto eq = l.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key=value");
    std::string key(trim(l.substr(0, eq)));
    std::string value(trim(l.substr(eq + 1)));
    if (std::find(keys.begin(), keys.end(), key) == keys.end())
      throw ConfigError(source + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
    kv[key] = value;
  }
  return kv;
}

KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path.string());
}

ExperimentConfig resolve_config(const KeyValues& kv) {
  const auto& keys = config_keys();
  for (const auto& [k, v] : kv)
    if (std::find(keys.begin(), keys.end(), k) == keys.end())
      throw ConfigError("unknown config key '" + k + "'");
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  auto uint_or = [&](const char* key, std::size_t def) {
    const auto* v = get(key);
    return v ? parse_uint<std::size_t>(key, *v) : def;
  };
  auto real_or = [&](const char* key, double def) {
    const auto* v = get(key);
    return v ? parse_real(key, *v) : def;
  };

  ExperimentConfig c;
  if (const auto* v = get("dataset")) c.dataset = *v;
  if (const auto* v = get("name")) {
    c.name = *v;
  } else if (!c.dataset.empty()) {
    const auto stem = c.dataset.stem().string();
    const auto canon = canonical_dataset_name(stem);
    c.name = canon.empty() ? stem : canon;
  }
  if (const auto* v = get("split")) c.split = parse_split(*v);
  c.train_ratio = real_or("train_ratio", c.train_ratio);
  c.val_ratio = real_or("val_ratio", c.val_ratio);
  c.test_ratio = real_or("test_ratio", c.test_ratio);
  c.train_count = uint_or("train_count", 0);
  c.val_count = uint_or("val_count", 0);
  c.test_count = uint_or("test_count", 0);

  auto& m = c.model;
  m.lookback = uint_or("lookback", 512);
  m.horizon = uint_or("horizon", 96);
  const auto defaults = benchmark_defaults(c.name, m.horizon);
  const auto* row = find_benchmark(c.name);
  m.channels = uint_or("channels", row ? row->channels : 0);
  m.segments = uint_or("segments", 32);
  m.encoders = uint_or("encoders", defaults.encoders);
  m.sharing = get("sharing") ? parse_sharing_mode(*get("sharing")) : SharingMode::InEncoder;
  m.revin_window = uint_or("revin_window", defaults.revin_window);
  if (m.revin_window == m.lookback) m.revin_window = 0;

  auto& t = c.train;
  t.lr = real_or("lr", 1e-4);
  t.beta1 = real_or("beta1", 0.9);
  t.beta2 = real_or("beta2", 0.999);
  t.rho = real_or("rho", defaults.rho);
  t.batch_size = uint_or("batch_size", defaults.batch_size);
  t.max_epochs = uint_or("max_epochs", 300);
  t.patience = uint_or("patience", 30);
  t.seed = uint_or("seed", 1);
  t.threads = static_cast<int>(uint_or("threads", 0));
  if (const auto* v = get("out")) c.out = *v;

  if (t.rho < 0.0) throw ConfigError("config key 'rho' must be non-negative");
  if (t.lr <= 0.0) throw ConfigError("config key 'lr' must be positive");
  if (t.batch_size == 0) throw ConfigError("config key 'batch_size' must be positive");
  return c;
}

KeyValues to_key_values(const ExperimentConfig& c) {
  KeyValues kv;
  kv["dataset"] = c.dataset.string();
  kv["name"] = c.name;
  kv["split"] = to_string(c.split);
  kv["train_ratio"] = fmt_real(c.train_ratio);
  kv["val_ratio"] = fmt_real(c.val_ratio);
  kv["test_ratio"] = fmt_real(c.test_ratio);
  kv["train_count"] = std::to_string(c.train_count);
  kv["val_count"] = std::to_string(c.val_count);
  kv["test_count"] = std::to_string(c.test_count);
  kv["channels"] = std::to_string(c.model.channels);
  kv["lookback"] = std::to_string(c.model.lookback);
  kv["horizon"] = std::to_string(c.model.horizon);
  kv["segments"] = std::to_string(c.model.segments);
  kv["encoders"] = std::to_string(c.model.encoders);
  kv["sharing"] = to_string(c.model.sharing);
  kv["revin_window"] = std::to_string(c.model.revin_window);
  kv["lr"] = fmt_real(c.train.lr);
  kv["beta1"] = fmt_real(c.train.beta1);
  kv["beta2"] = fmt_real(c.train.beta2);
  kv["rho"] = fmt_real(c.train.rho);
  kv["batch_size"] = std::to_string(c.train.batch_size);
  kv["max_epochs"] = std::to_string(c.train.max_epochs);
  kv["patience"] = std::to_string(c.train.patience);
  kv["seed"] = std::to_string(c.train.seed);
  kv["threads"] = std::to_string(c.train.threads);
  kv["out"] = c.out.string();
  return kv;
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& key : config_keys()) {
    auto it = kv.find(key);
    if (it != kv.end()) out += key + "=" + it->second + "\n";
  }
  return out;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return to_key_values(a) == to_key_values(b);
}

}  // namespace psformer
