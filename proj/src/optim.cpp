#include "psformer/optim.hpp"

#include <cmath>
#include <string>

namespace psformer {

template <typename T>
void Sgd<T>::step(std::span<Tensor<T>> params) {
  const T lr = static_cast<T>(lr_);
  for (auto& p : params) {
    auto g = p.grad();
    auto v = p.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  }
}

template <typename T>
void Adam<T>::step(std::span<Tensor<T>> params) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), T{0});
      v_.emplace_back(p.size(), T{0});
    }
  }
  if (m_.size() != params.size())
    throw ShapeError("adam: optimizer state holds " + std::to_string(m_.size()) +
                     " tensors, step got " + std::to_string(params.size()));
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
  const T step_size = static_cast<T>(cfg_.lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(cfg_.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (p.size() != m_[k].size())
      throw ShapeError("adam: tensor " + std::to_string(k) + " changed size");
    auto g = p.grad();
    auto x = p.data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      x[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
    }
  }
}

template <typename T>
double global_grad_norm(std::span<const Tensor<T>> params) {
  double ss = 0.0;
  for (const auto& p : params)
    for (auto g : p.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(ss);
}

template <typename T>
SamStepInfo sam_step(std::span<Tensor<T>> params, const LossFn& loss_fn, const SamConfig& sam,
                     Optimizer<T>& base) {
  if (sam.rho < 0.0) throw TrainingError("SAM rho must be non-negative");
  auto zero = [&] {
    for (auto& p : params) p.zero_grad();
  };
  SamStepInfo info;
  zero();
  info.loss = loss_fn();
  info.perturbed_loss = info.loss;
  info.grad_norm = global_grad_norm<T>(params);

  if (sam.enabled && sam.rho > 0.0 && info.grad_norm > 0.0) {
    std::vector<std::vector<T>> saved;
    saved.reserve(params.size());
    const double factor = sam.rho / info.grad_norm;
    double eps_ss = 0.0;
    for (auto& p : params) {
      saved.emplace_back(p.data().begin(), p.data().end());
      auto x = p.data();
      auto g = p.grad();
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double e = factor * static_cast<double>(g[i]);
        eps_ss += e * e;
        x[i] = static_cast<T>(static_cast<double>(x[i]) + e);
      }
    }
    info.perturbation_norm = std::sqrt(eps_ss);
    zero();
    info.perturbed_loss = loss_fn();
    for (std::size_t k = 0; k < params.size(); ++k)
      std::copy(saved[k].begin(), saved[k].end(), params[k].data().begin());
  }
  base.step(params);
  return info;
}

EarlyStopping::Decision EarlyStopping::update(double val_loss,
                                              const std::function<void()>& on_improve) {
  if (std::isnan(val_loss))
    throw TrainingError("validation loss is NaN at epoch " + std::to_string(epoch_ + 1));
  ++epoch_;
  if (val_loss < best_) {
    best_ = val_loss;
    best_epoch_ = epoch_;
    since_ = 0;
    if (on_improve) on_improve();
    return Decision::Continue;
  }
  ++since_;
  return since_ > patience_ ? Decision::Stop : Decision::Continue;
}

template class Sgd<float>;
template class Sgd<double>;
template class Adam<float>;
template class Adam<double>;
template double global_grad_norm(std::span<const Tensor<float>>);
template double global_grad_norm(std::span<const Tensor<double>>);
template SamStepInfo sam_step(std::span<Tensor<float>>, const LossFn&, const SamConfig&,
                              Optimizer<float>&);
template SamStepInfo sam_step(std::span<Tensor<double>>, const LossFn&, const SamConfig&,
                              Optimizer<double>&);

}  // namespace psformer
