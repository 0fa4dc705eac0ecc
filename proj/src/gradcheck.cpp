#include "psformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace psformer {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

ModelConfig grad_check_config() {
  ModelConfig cfg;
  cfg.channels = 2;
  cfg.lookback = 8;
  cfg.segments = 4;
  cfg.horizon = 2;
  cfg.encoders = 1;
  return cfg;
}

GradCheckResult grad_check(const ModelConfig& cfg, const GradCheckOptions& opts) {
  cfg.validate();
  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  auto params = PSformerParams<double>::init(cfg, opts.seed);
  // Non-zero biases so every bias path carries signal.
  for (auto& b : params.blocks)
    for (auto* t : {&b.b1, &b.b2, &b.b3})
      for (auto& v : t->storage()) v = 0.1 * normal(rng);
  for (auto& v : params.head_b.storage()) v = 0.1 * normal(rng);

  const std::size_t B = opts.batch;
  Tensor<double> x({B, cfg.channels, cfg.lookback});
  Tensor<double> y({B, cfg.channels, cfg.horizon});
  for (auto& v : x.storage()) v = normal(rng);
  for (auto& v : y.storage()) v = normal(rng);

  auto loss_at = [&] {
    Tape<double> tape;
    tape.set_recording(false);
    return mse_loss(tape, model_forward(tape, x, params, cfg), y).item();
  };

  params.zero_grad();
  {
    Tape<double> tape;
    auto loss = mse_loss(tape, model_forward(tape, x, params, cfg), y);
    tape.backward(loss);
  }

  GradCheckResult result;
  auto tensors = params.tensors();
  const auto names = params.tensor_names();
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    GradCheckGroup g;
    g.name = names[k];
    auto& t = tensors[k];
    g.elements = t.size();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + opts.step;
      const double up = loss_at();
      t[i] = orig - opts.step;
      const double down = loss_at();
      t[i] = orig;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double analytic = t.grad()[i];
      g.max_rel_error = std::max(g.max_rel_error, relative_error(analytic, numeric));
      g.max_abs_error = std::max(g.max_abs_error, std::abs(analytic - numeric));
    }
    result.max_rel_error = std::max(result.max_rel_error, g.max_rel_error);
    result.groups.push_back(std::move(g));
  }
  result.passed = result.max_rel_error < opts.tolerance;
  return result;
}

}  // namespace psformer
