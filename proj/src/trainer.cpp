#include "psformer/trainer.hpp"

#include <chrono>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "psformer/kernels.hpp"

namespace psformer {

template <typename T>
void MetricAccumulator::add(std::span<const T> pred, std::span<const T> target) {
  if (pred.size() != target.size())
    throw ShapeError("metric: prediction has " + std::to_string(pred.size()) +
                     " elements, target " + std::to_string(target.size()));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    sq_ += d * d;
    abs_ += std::abs(d);
  }
  count_ += pred.size();
}

template <typename T>
double mse(std::span<const T> pred, std::span<const T> target) {
  MetricAccumulator acc;
  acc.add(pred, target);
  return acc.mse();
}

template <typename T>
double mae(std::span<const T> pred, std::span<const T> target) {
  MetricAccumulator acc;
  acc.add(pred, target);
  return acc.mae();
}

namespace {

void check_dataset(const ModelConfig& cfg, const WindowedDataset& ds) {
  if (ds.channels() != cfg.channels)
    throw ConfigError("dataset has " + std::to_string(ds.channels()) + " channels, model expects " +
                      std::to_string(cfg.channels));
  if (ds.lookback() != cfg.lookback || ds.horizon() != cfg.horizon)
    throw ConfigError("dataset windows (L=" + std::to_string(ds.lookback()) +
                      ", F=" + std::to_string(ds.horizon()) + ") do not match model (L=" +
                      std::to_string(cfg.lookback) + ", F=" + std::to_string(cfg.horizon) + ")");
}

std::string fmt(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

template <typename T>
Metrics evaluate(const PSformerParams<T>& params, const ModelConfig& cfg,
                 const WindowedDataset& ds, Region region, std::size_t batch_size) {
  check_dataset(cfg, ds);
  BatchIterator<T> it(ds, region, batch_size, false, false);
  Tape<T> tape;
  tape.set_recording(false);
  MetricAccumulator acc;
  Metrics out;
  Batch<T> b;
  while (it.next(b)) {
    Tensor<T> x({b.size, b.channels, b.lookback}, std::move(b.input));
    auto pred = model_forward(tape, x, params, cfg);
    acc.add<T>(pred.data(), std::span<const T>(b.target));
    out.windows += b.size;
  }
  out.mse = acc.mse();
  out.mae = acc.mae();
  return out;
}

template <typename T>
TrainResult<T> train(const ModelConfig& model_cfg, const TrainConfig& tc,
                     const WindowedDataset& ds, const EpochCallback& on_epoch) {
  model_cfg.validate();
  check_dataset(model_cfg, ds);
  if (tc.batch_size == 0) throw ConfigError("batch size must be positive");
  if (tc.max_epochs == 0) throw ConfigError("max_epochs must be positive");
  kernels::set_threads(tc.threads);

  TrainResult<T> result;
  RunReport& rep = result.report;
  rep.model = model_cfg;
  rep.train = tc;
  rep.floored_channels = ds.floored_channels();

  auto params = PSformerParams<T>::init(model_cfg, tc.seed);
  rep.params = count_parameters(params);
  result.best = params.clone();
  auto tensors = params.tensors();

  Adam<T> adam(AdamConfig{tc.lr, tc.beta1, tc.beta2, 1e-8});
  const SamConfig sam{tc.rho, tc.rho > 0.0};
  EarlyStopping stopper(tc.patience);
  BatchIterator<T> batches(ds, Region::Train, tc.batch_size, true, true, tc.seed);
  if (batches.batch_count() == 0)
    throw TrainingError("train region has " + std::to_string(ds.window_count(Region::Train)) +
                        " windows, fewer than one batch of " + std::to_string(tc.batch_size));

  Batch<T> batch;
  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (epoch > 1) batches.reset();
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    while (batches.next(batch)) {
      Tensor<T> x({batch.size, batch.channels, batch.lookback}, batch.input);
      Tensor<T> y({batch.size, batch.channels, batch.horizon}, batch.target);
      auto loss_fn = [&]() -> double {
        Tape<T> tape;
        auto pred = model_forward(tape, x, params, model_cfg);
        auto loss = mse_loss(tape, pred, y);
        tape.backward(loss);
        return static_cast<double>(loss.item());
      };
      const auto info = sam_step<T>(tensors, loss_fn, sam, adam);
      if (!std::isfinite(info.loss) || !std::isfinite(info.perturbed_loss))
        throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(n_batches + 1));
      loss_sum += info.loss;
      ++n_batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n_batches);
    rec.val_loss = evaluate(params, model_cfg, ds, Region::Val, tc.batch_size).mse;
    if (!std::isfinite(rec.val_loss))
      throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
    const auto decision = stopper.update(rec.val_loss, [&] {
      result.best.assign_from(params);
      rec.improved = true;
    });
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rep.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    rep.stop_epoch = epoch;
    if (decision == EarlyStopping::Decision::Stop) {
      rep.early_stopped = true;
      break;
    }
  }

  rep.best_epoch = stopper.best_epoch();
  rep.best_val_loss = stopper.best();
  const auto test = evaluate(result.best, model_cfg, ds, Region::Test, tc.batch_size);
  rep.test_mse = test.mse;
  rep.test_mae = test.mae;
  rep.test_windows = test.windows;
  return result;
}

void write_report(std::ostream& os, const RunReport& r) {
  os << "format=psformer-run-report\n";
  os << "version=1\n";
  os << "model.channels=" << r.model.channels << '\n';
  os << "model.lookback=" << r.model.lookback << '\n';
  os << "model.segments=" << r.model.segments << '\n';
  os << "model.patch=" << r.model.patch() << '\n';
  os << "model.segment_length=" << r.model.segment_length() << '\n';
  os << "model.horizon=" << r.model.horizon << '\n';
  os << "model.encoders=" << r.model.encoders << '\n';
  os << "model.sharing=" << to_string(r.model.sharing) << '\n';
  os << "model.revin_window=" << r.model.stats_window() << '\n';
  os << "train.max_epochs=" << r.train.max_epochs << '\n';
  os << "train.patience=" << r.train.patience << '\n';
  os << "train.batch_size=" << r.train.batch_size << '\n';
  os << "train.lr=" << fmt(r.train.lr) << '\n';
  os << "train.beta1=" << fmt(r.train.beta1) << '\n';
  os << "train.beta2=" << fmt(r.train.beta2) << '\n';
  os << "train.rho=" << fmt(r.train.rho) << '\n';
  os << "train.seed=" << r.train.seed << '\n';
  os << "train.threads=" << r.train.threads << '\n';
  os << "params.total=" << r.params.total << '\n';
  os << "params.encoder=" << r.params.encoder << '\n';
  os << "params.head=" << r.params.head << '\n';
  os << "params.distinct_blocks=" << r.params.distinct_blocks << '\n';
  os << "standardization.floored_channels=";
  for (std::size_t i = 0; i < r.floored_channels.size(); ++i)
    os << (i ? "," : "") << r.floored_channels[i];
  os << '\n';
  os << "epochs.count=" << r.epochs.size() << '\n';
  for (const auto& e : r.epochs) {
    const std::string k = "epoch." + std::to_string(e.epoch) + ".";
    os << k << "train_loss=" << fmt(e.train_loss) << '\n';
    os << k << "val_loss=" << fmt(e.val_loss) << '\n';
    os << k << "seconds=" << fmt(e.seconds) << '\n';
    os << k << "improved=" << (e.improved ? 1 : 0) << '\n';
  }
  os << "stop_epoch=" << r.stop_epoch << '\n';
  os << "early_stopped=" << (r.early_stopped ? 1 : 0) << '\n';
  os << "best_epoch=" << r.best_epoch << '\n';
  os << "best_val_loss=" << fmt(r.best_val_loss) << '\n';
  os << "test.mse=" << fmt(r.test_mse) << '\n';
  os << "test.mae=" << fmt(r.test_mae) << '\n';
  os << "test.windows=" << r.test_windows << '\n';
}

void write_report(const std::filesystem::path& path, const RunReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  write_report(out, report);
}

template void MetricAccumulator::add<float>(std::span<const float>, std::span<const float>);
template void MetricAccumulator::add<double>(std::span<const double>, std::span<const double>);
template double mse(std::span<const float>, std::span<const float>);
template double mse(std::span<const double>, std::span<const double>);
template double mae(std::span<const float>, std::span<const float>);
template double mae(std::span<const double>, std::span<const double>);
template Metrics evaluate(const PSformerParams<float>&, const ModelConfig&, const WindowedDataset&,
                          Region, std::size_t);
template Metrics evaluate(const PSformerParams<double>&, const ModelConfig&,
                          const WindowedDataset&, Region, std::size_t);
template TrainResult<float> train(const ModelConfig&, const TrainConfig&, const WindowedDataset&,
                                  const EpochCallback&);
template TrainResult<double> train(const ModelConfig&, const TrainConfig&, const WindowedDataset&,
                                   const EpochCallback&);

}  // namespace psformer
