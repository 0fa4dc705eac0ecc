#pragma once

// Base optimizers, the sharpness-aware (SAM) two-pass wrapper and early
// stopping.

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "psformer/tensor.hpp"

namespace psformer {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Applies one update from the gradients currently stored on `params`.
template <typename T>
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::span<Tensor<T>> params) = 0;
};

/// θ ← θ − η·g.
template <typename T>
class Sgd final : public Optimizer<T> {
 public:
  explicit Sgd(double lr) : lr_(lr) {}
  void step(std::span<Tensor<T>> params) override;

 private:
  double lr_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Moment buffers are created on the first step and
/// bound to the order and shapes of the tensors passed in.
template <typename T>
class Adam final : public Optimizer<T> {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  void step(std::span<Tensor<T>> params) override;

  std::size_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<std::vector<T>>& first_moment() const { return m_; }
  const std::vector<std::vector<T>>& second_moment() const { return v_; }

 private:
  AdamConfig cfg_;
  std::size_t step_ = 0;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
};

struct SamConfig {
  double rho = 0.0;
  bool enabled = true;
};

struct SamStepInfo {
  double loss = 0.0;            // L(θ)
  double perturbed_loss = 0.0;  // L(θ + ε̂), equal to loss when no perturbation
  double grad_norm = 0.0;       // ‖∇L(θ)‖₂ over all parameters
  double perturbation_norm = 0.0;
};

/// Evaluates the loss at the current parameter values and accumulates its
/// gradient into the parameters' grad buffers.
using LossFn = std::function<double()>;

/// Global L2 norm of the gradients of `params`.
template <typename T>
double global_grad_norm(std::span<const Tensor<T>> params);

/// One SAM update: ε̂ = ρ·g/‖g‖, gradient re-evaluated at θ + ε̂, θ restored,
/// then `base` steps with that gradient. With ρ = 0, a disabled config or a
/// zero gradient the base optimizer steps with g directly.
template <typename T>
SamStepInfo sam_step(std::span<Tensor<T>> params, const LossFn& loss_fn, const SamConfig& sam,
                     Optimizer<T>& base);

/// Tracks validation loss and decides when to stop. Only strict improvements
/// reset the counter; training stops once the counter exceeds `patience`.
class EarlyStopping {
 public:
  enum class Decision { Continue, Stop };

  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// `on_improve` runs when val_loss beats the best so far (snapshot hook).
  Decision update(double val_loss, const std::function<void()>& on_improve = {});

  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }  // 1-based, 0 before any update
  std::size_t epochs_since_improvement() const { return since_; }
  std::size_t patience() const { return patience_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t since_ = 0;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
};

}  // namespace psformer
