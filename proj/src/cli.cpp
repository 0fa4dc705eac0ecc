#include "psformer/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "psformer/checkpoint.hpp"
#include "psformer/config.hpp"
#include "psformer/dataset.hpp"
#include "psformer/gradcheck.hpp"
#include "psformer/kernels.hpp"
#include "psformer/model.hpp"
#include "psformer/trainer.hpp"

namespace psformer {
namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Flag name → config key.
const std::vector<std::pair<std::string, std::string>>& flag_keys() {
  static const std::vector<std::pair<std::string, std::string>> k = {
      {"--dataset", "dataset"},       {"--name", "name"},
      {"--split", "split"},           {"--channels", "channels"},
      {"--lookback", "lookback"},     {"--horizon", "horizon"},
      {"--segments", "segments"},     {"--encoders", "encoders"},
      {"--sharing", "sharing"},       {"--rho", "rho"},
      {"--revin-window", "revin_window"}, {"--lr", "lr"},
      {"--batch-size", "batch_size"}, {"--max-epochs", "max_epochs"},
      {"--patience", "patience"},     {"--seed", "seed"},
      {"--threads", "threads"},       {"--out", "out"},
  };
  return k;
}

struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, CLI::Option*>> options;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key=value config file");
    for (const auto& [flag, key] : flag_keys())
      options.emplace_back(key, app->add_option(flag, values[key], "config key " + key));
    app->add_option("--set", sets, "extra key=value override (repeatable)");
  }

  KeyValues merged() const {
    KeyValues kv;
    if (!config_file.empty()) kv = read_config_file(config_file);
    for (const auto& [key, opt] : options)
      if (opt->count() > 0) kv[key] = values.at(key);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      auto extra = parse_key_values(s, "--set");
      for (auto& [k, v] : extra) kv[k] = v;
    }
    return kv;
  }

  bool has(const std::string& key) const {
    for (const auto& [k, opt] : options)
      if (k == key) return opt->count() > 0;
    return false;
  }
};

void apply_threads(int threads) {
  if (threads > 0) kernels::set_threads(threads);
}

struct LoadedData {
  RawSeries raw;
  std::unique_ptr<WindowedDataset> ds;
};

LoadedData load_dataset(ExperimentConfig& cfg) {
  if (cfg.dataset.empty()) throw UsageError("--dataset is required");
  LoadedData d;
  d.raw = load_csv(cfg.dataset);
  if (cfg.model.channels != 0 && cfg.model.channels != d.raw.channels)
    throw DataError("dataset " + cfg.dataset.string() + " has " + std::to_string(d.raw.channels) +
                    " channels but the config says " + std::to_string(cfg.model.channels));
  cfg.model.channels = d.raw.channels;
  cfg.model.validate();
  d.ds = std::make_unique<WindowedDataset>(d.raw, cfg.split_spec(), cfg.model.lookback,
                                           cfg.model.horizon);
  return d;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

RunReport train_to(ExperimentConfig cfg, const fs::path& out_dir, std::ostream& out, bool verbose) {
  auto data = load_dataset(cfg);
  apply_threads(cfg.train.threads);
  fs::create_directories(out_dir);
  cfg.out = out_dir;
  write_text(out_dir / "config.txt", format_key_values(to_key_values(cfg)));

  auto result = train<float>(cfg.model, cfg.train, *data.ds, [&](const EpochRecord& e) {
    if (verbose)
      out << "epoch " << e.epoch << " train=" << fmt("%.6g", e.train_loss)
          << " val=" << fmt("%.6g", e.val_loss) << (e.improved ? " *" : "") << "\n";
  });
  write_report(out_dir / "report.txt", result.report);
  Checkpoint<float> ckpt{cfg.model, cfg.train.seed, result.best,
                         format_key_values(to_key_values(cfg))};
  save_checkpoint(out_dir / "checkpoint.psf", ckpt);
  return result.report;
}

int cmd_train(const ConfigFlags& flags, std::ostream& out) {
  auto cfg = resolve_config(flags.merged());
  const auto report = train_to(cfg, cfg.out, out, true);
  out << "stop_epoch=" << report.stop_epoch << "\n"
      << "best_epoch=" << report.best_epoch << "\n"
      << "params.total=" << report.params.total << "\n"
      << "test.mse=" << fmt("%.6g", report.test_mse) << "\n"
      << "test.mae=" << fmt("%.6g", report.test_mae) << "\n"
      << "artifacts=" << cfg.out.string() << "\n";
  return kExitOk;
}

Region parse_region(const std::string& s) {
  if (s == "train") return Region::Train;
  if (s == "val") return Region::Val;
  if (s == "test") return Region::Test;
  throw UsageError("unknown split region '" + s + "' (expected train, val or test)");
}

// Dataset config for a checkpointed model: geometry comes from the checkpoint,
// split settings and dataset from flags.
ExperimentConfig checkpoint_experiment(const ConfigFlags& flags, const ModelConfig& model) {
  auto kv = flags.merged();
  for (const char* k : {"lookback", "horizon", "segments", "encoders", "sharing", "revin_window"})
    kv.erase(k);
  auto cfg = resolve_config(kv);
  const auto channels = cfg.model.channels;
  cfg.model = model;
  if (channels != 0 && channels != model.channels)
    throw DataError("checkpoint has " + std::to_string(model.channels) +
                    " channels but the config says " + std::to_string(channels));
  cfg.model.channels = 0;
  return cfg;
}

int cmd_eval(const ConfigFlags& flags, const std::string& ckpt_path, const std::string& region,
             std::ostream& out) {
  if (ckpt_path.empty()) throw UsageError("--checkpoint is required");
  const auto ckpt = load_checkpoint<float>(ckpt_path);
  auto cfg = checkpoint_experiment(flags, ckpt.config);
  auto data = load_dataset(cfg);
  if (cfg.model.channels != ckpt.config.channels)
    throw DataError("dataset channel count does not match the checkpoint");
  apply_threads(cfg.train.threads);
  const auto r = parse_region(region);
  const auto m = evaluate(ckpt.params, cfg.model, *data.ds, r, cfg.train.batch_size);
  out << "region=" << region_name(r) << "\n"
      << "mse=" << fmt("%.17g", m.mse) << "\n"
      << "mae=" << fmt("%.17g", m.mae) << "\n"
      << "windows=" << m.windows << "\n";
  return kExitOk;
}

int cmd_count_params(const ConfigFlags& flags, std::ostream& out) {
  auto cfg = resolve_config(flags.merged());
  if (cfg.model.channels == 0) cfg.model.channels = 7;
  const auto& m = cfg.model;
  m.validate();
  const auto pc = count_parameters(m);
  out << "config: M=" << m.channels << " L=" << m.lookback << " N=" << m.segments
      << " F=" << m.horizon << " encoders=" << m.encoders << " sharing=" << to_string(m.sharing)
      << "\n";
  out << "full=" << pc.total << "\n"
      << "encoder=" << pc.encoder << "\n"
      << "head=" << pc.head << "\n"
      << "distinct_blocks=" << pc.distinct_blocks << "\n\n";
  char line[128];
  std::snprintf(line, sizeof line, "%-16s %8s %10s %10s %10s\n", "sharing", "blocks", "encoder",
                "head", "full");
  out << line;
  for (auto mode : {SharingMode::InEncoder, SharingMode::CrossEncoders, SharingMode::All,
                    SharingMode::None}) {
    auto c = m;
    c.sharing = mode;
    const auto p = count_parameters(c);
    std::snprintf(line, sizeof line, "%-16s %8zu %10zu %10zu %10zu\n", to_string(mode).c_str(),
                  p.distinct_blocks, p.encoder, p.head, p.total);
    out << line;
  }
  return kExitOk;
}

int cmd_grad_check(const ConfigFlags& flags, std::ostream& out) {
  auto cfg = grad_check_config();
  const auto kv = flags.merged();
  if (flags.has("encoders")) cfg.encoders = std::stoul(kv.at("encoders"));
  if (flags.has("sharing")) cfg.sharing = parse_sharing_mode(kv.at("sharing"));
  GradCheckOptions opts;
  if (flags.has("seed")) opts.seed = std::stoull(kv.at("seed"));
  const auto r = grad_check(cfg, opts);
  out << "config: M=" << cfg.channels << " L=" << cfg.lookback << " N=" << cfg.segments
      << " F=" << cfg.horizon << " encoders=" << cfg.encoders
      << " sharing=" << to_string(cfg.sharing) << " precision=f64 h=" << opts.step << "\n";
  char line[160];
  for (const auto& g : r.groups) {
    std::snprintf(line, sizeof line, "%-12s elements=%-4zu max_rel=%.3e max_abs=%.3e %s\n",
                  g.name.c_str(), g.elements, g.max_rel_error, g.max_abs_error,
                  g.max_rel_error < opts.tolerance ? "ok" : "FAIL");
    out << line;
  }
  out << "max_rel_error=" << fmt("%.3e", r.max_rel_error) << "\n"
      << "result=" << (r.passed ? "PASS" : "FAIL") << "\n";
  return r.passed ? kExitOk : kExitFailure;
}

void write_matrix_csv(const fs::path& path, const float* values, std::size_t rows,
                      std::size_t cols) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  char buf[32];
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(values[i * cols + j]));
      if (j) f << ',';
      f << buf;
    }
    f << '\n';
  }
}

struct ExportFlags {
  std::string checkpoint;
  std::size_t sample = 0;
  std::string region = "test";
  std::vector<std::size_t> channels;
  std::vector<std::string> pairs;
};

std::pair<std::size_t, std::size_t> parse_pair(const std::string& s) {
  const auto sep = s.find_first_of(",:");
  if (sep == std::string::npos) throw UsageError("--channel-pair expects A,B, got '" + s + "'");
  try {
    return {std::stoul(s.substr(0, sep)), std::stoul(s.substr(sep + 1))};
  } catch (const std::exception&) {
    throw UsageError("--channel-pair expects A,B, got '" + s + "'");
  }
}

int cmd_export(const ConfigFlags& flags, const ExportFlags& ex, std::ostream& out) {
  if (ex.checkpoint.empty()) throw UsageError("--checkpoint is required");
  const auto ckpt = load_checkpoint<float>(ex.checkpoint);
  auto cfg = checkpoint_experiment(flags, ckpt.config);
  auto data = load_dataset(cfg);
  if (cfg.model.channels != ckpt.config.channels)
    throw DataError("dataset channel count does not match the checkpoint");
  const auto r = parse_region(ex.region);
  const auto count = data.ds->window_count(r);
  if (ex.sample >= count)
    throw DataError("sample " + std::to_string(ex.sample) + " out of range: " + region_name(r) +
                    " has " + std::to_string(count) + " windows");
  const auto& m = cfg.model;
  for (auto c : ex.channels)
    if (c >= m.channels) throw DataError("channel " + std::to_string(c) + " out of range");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& s : ex.pairs) {
    pairs.push_back(parse_pair(s));
    if (pairs.back().first >= m.channels || pairs.back().second >= m.channels)
      throw DataError("channel pair '" + s + "' out of range");
  }

  Tensor<float> x({1, m.channels, m.lookback});
  std::vector<float> target(m.channels * m.horizon);
  data.ds->copy_window(r, ex.sample, x.data().data(), target.data());
  const auto maps = export_attention(x, ckpt.params, m);

  fs::create_directories(cfg.out);
  std::size_t files = 0;
  const auto P = m.patch();
  for (const auto& map : maps) {
    const std::string stem = "attn_e" + std::to_string(map.encoder) + "_s" +
                             std::to_string(map.stage) + "_" + (map.post_softmax ? "post" : "pre");
    write_matrix_csv(cfg.out / (stem + ".csv"), map.values.data(), map.size, map.size);
    ++files;
    for (auto c : ex.channels) {
      const auto sub = channel_submatrix(map, P, c, c);
      write_matrix_csv(cfg.out / (stem + "_ch" + std::to_string(c) + ".csv"), sub.data(), P, P);
      ++files;
    }
    for (auto [a, b] : pairs) {
      const auto sub = channel_submatrix(map, P, a, b);
      write_matrix_csv(cfg.out / (stem + "_ch" + std::to_string(a) + "x" + std::to_string(b) +
                                  ".csv"),
                       sub.data(), P, P);
      ++files;
    }
  }
  out << "sample=" << ex.sample << " region=" << region_name(r) << "\n"
      << "matrices=" << maps.size() << "\n"
      << "files=" << files << "\n"
      << "out=" << cfg.out.string() << "\n";
  return kExitOk;
}

std::vector<std::string> default_axis_values(const std::string& axis) {
  if (axis == "segments") return {"8", "16", "32", "64"};
  if (axis == "encoders") return {"1", "2", "3", "4"};
  if (axis == "sharing") return {"in_encoder", "cross_encoders", "all", "none"};
  if (axis == "rho") {
    std::vector<std::string> v;
    for (int i = 0; i <= 10; ++i) v.push_back(fmt("%.1f", i / 10.0));
    return v;
  }
  throw UsageError("unknown ablation axis '" + axis + "' (segments, encoders, sharing, rho)");
}

int cmd_ablate(const ConfigFlags& flags, const std::string& axis,
               const std::vector<std::string>& given, std::ostream& out, std::ostream& err) {
  const auto defaults = default_axis_values(axis);
  const auto& values = given.empty() ? defaults : given;
  const auto base_kv = flags.merged();
  const auto base = resolve_config(base_kv);
  if (base.dataset.empty()) throw UsageError("--dataset is required");

  std::ostringstream table;
  char line[200];
  std::snprintf(line, sizeof line, "%-16s %10s %6s %6s %12s %12s %12s %s\n", axis.c_str(),
                "params", "best", "stop", "val_loss", "test_mse", "test_mae", "note");
  table << line;
  int failures = 0;
  for (const auto& value : values) {
    auto kv = base_kv;
    kv[axis == "rho" ? "rho" : axis] = value;
    const fs::path dir = base.out / (axis + "-" + value);
    kv["out"] = dir.string();
    try {
      auto cfg = resolve_config(kv);
      if (axis == "segments" && (cfg.model.segments == 0 ||
                                 cfg.model.lookback % cfg.model.segments != 0)) {
        std::snprintf(line, sizeof line, "%-16s %10s %6s %6s %12s %12s %12s %s\n", value.c_str(),
                      "-", "-", "-", "-", "-", "-", "skipped: does not divide lookback");
        table << line;
        continue;
      }
      out << "== " << axis << "=" << value << "\n";
      const auto rep = train_to(cfg, dir, out, false);
      std::snprintf(line, sizeof line, "%-16s %10zu %6zu %6zu %12.6g %12.6g %12.6g %s\n",
                    value.c_str(), rep.params.total, rep.best_epoch, rep.stop_epoch,
                    rep.best_val_loss, rep.test_mse, rep.test_mae, "");
      table << line;
    } catch (const std::exception& e) {
      ++failures;
      err << "ablate " << axis << "=" << value << ": " << e.what() << "\n";
      std::snprintf(line, sizeof line, "%-16s %10s %6s %6s %12s %12s %12s %s\n", value.c_str(),
                    "-", "-", "-", "-", "-", "-", "failed");
      table << line;
    }
  }
  fs::create_directories(base.out);
  write_text(base.out / ("ablation-" + axis + ".txt"), table.str());
  out << table.str();
  return failures ? kExitFailure : kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"PSformer time-series forecasting toolkit", "psformer"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "train a model and write report + checkpoint");
  ConfigFlags train_flags;
  train_flags.attach(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset region");
  ConfigFlags eval_flags;
  eval_flags.attach(eval_cmd);
  std::string eval_ckpt, eval_region = "test";
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file");
  eval_cmd->add_option("--region", eval_region, "train, val or test");

  auto* count_cmd = app.add_subcommand("count-params", "print trainable parameter counts");
  ConfigFlags count_flags;
  count_flags.attach(count_cmd);

  auto* grad_cmd = app.add_subcommand("grad-check", "finite-difference gradient check (f64)");
  ConfigFlags grad_flags;
  grad_flags.attach(grad_cmd);
  double fault_scale = 1.0;
  grad_cmd->add_option("--fault-gelu-scale", fault_scale,
                       "scale the GeLU backward rule (negative control)");

  auto* export_cmd = app.add_subcommand("export-attention", "write attention matrices as CSV");
  ConfigFlags export_flags;
  export_flags.attach(export_cmd);
  ExportFlags ex;
  export_cmd->add_option("--checkpoint", ex.checkpoint, "checkpoint file");
  export_cmd->add_option("--sample", ex.sample, "window index within the region");
  export_cmd->add_option("--region", ex.region, "train, val or test");
  export_cmd->add_option("--channel", ex.channels, "single-channel submatrix (repeatable)");
  export_cmd->add_option("--channel-pair", ex.pairs, "channel-pair submatrix A,B (repeatable)");

  auto* ablate_cmd = app.add_subcommand("ablate", "sweep one axis and tabulate results");
  ConfigFlags ablate_flags;
  ablate_flags.attach(ablate_cmd);
  std::string axis;
  std::vector<std::string> axis_values;
  ablate_cmd->add_option("--axis", axis, "segments, encoders, sharing or rho")->required();
  ablate_cmd->add_option("--values", axis_values, "override the default sweep values")
      ->delimiter(',');

  std::vector<const char*> argv{"psformer"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "psformer: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_flags, out);
    if (*eval_cmd) return cmd_eval(eval_flags, eval_ckpt, eval_region, out);
    if (*count_cmd) return cmd_count_params(count_flags, out);
    if (*grad_cmd) {
      fault::set_gelu_backward_scale(fault_scale);
      const int code = cmd_grad_check(grad_flags, out);
      fault::set_gelu_backward_scale(1.0);
      return code;
    }
    if (*export_cmd) return cmd_export(export_flags, ex, out);
    if (*ablate_cmd) return cmd_ablate(ablate_flags, axis, axis_values, out, err);
  } catch (const UsageError& e) {
    err << "psformer: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "psformer: config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    fault::set_gelu_backward_scale(1.0);
    err << "psformer: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace psformer
