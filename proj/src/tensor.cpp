#include "psformer/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>

#include "psformer/kernels.hpp"

namespace psformer {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace fault {
namespace {
std::atomic<double> g_gelu_scale{1.0};
}
void set_gelu_backward_scale(double factor) noexcept { g_gelu_scale.store(factor); }
double gelu_backward_scale() noexcept { return g_gelu_scale.load(); }
}  // namespace fault

template <typename T>
void Tape<T>::record(std::vector<NodePtr> inputs, NodePtr output, BackwardFn backward) {
  for (const auto& in : inputs)
    if (in->requires_grad && !in->leaf && produced_.count(in.get()) == 0)
      throw ContractError("tape: operation input was produced on a different or cleared tape");
  output->leaf = false;
  produced_.insert(output.get());
  entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad())
    throw ContractError("backward(): loss does not depend on any tensor requiring grad");
  const bool on_tape = produced_.count(loss.node().get()) > 0;
  if (!on_tape && !loss.node()->leaf)
    throw ContractError("backward(): loss was not produced on this tape");

  for (auto& e : entries_) std::fill(e.output->grad.begin(), e.output->grad.end(), T{0});
  if (on_tape) {
    loss.node()->grad[0] = T{1};
  } else {
    loss.node()->grad[0] += T{1};
    return;
  }
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
}

namespace {

template <typename T>
bool any_grad(const Tape<T>& tape, std::initializer_list<const Tensor<T>*> ins) {
  if (!tape.recording()) return false;
  return std::any_of(ins.begin(), ins.end(), [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

template <typename T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src, T factor = T{1}) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
}

}  // namespace

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0))
    throw ShapeError("matmul: cannot multiply " + to_string(a.shape()) + " by " +
                     to_string(b.shape()));
  const std::size_t inner = b.dim(0);
  const std::size_t cols = b.dim(1);
  const std::size_t rows = a.size() / inner;
  Shape out_shape = a.shape();
  out_shape.back() = cols;
  const bool grad = any_grad(tape, {&a, &b});
  Tensor<T> out(out_shape, T{0}, grad);
  kernels::matmul_nn<T>(a.data(), b.data(), out.data(), 1, rows, inner, cols, false);
  if (grad) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape.record({an, bn}, on, [an, bn, on, rows, inner, cols] {
      if (an->requires_grad)
        kernels::matmul_nt<T>(on->grad, bn->data, an->grad, 1, rows, cols, inner, true);
      if (bn->requires_grad)
        kernels::matmul_tn<T>(an->data, on->grad, bn->grad, 1, inner, rows, cols, true);
    });
  }
  return out;
}

template <typename T>
Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw ShapeError("bmm: cannot multiply " + to_string(a.shape()) + " by " +
                     to_string(b.shape()));
  const std::size_t batch = a.dim(0), rows = a.dim(1), inner = a.dim(2), cols = b.dim(2);
  const bool grad = any_grad(tape, {&a, &b});
  Tensor<T> out({batch, rows, cols}, T{0}, grad);
  kernels::matmul_nn<T>(a.data(), b.data(), out.data(), batch, rows, inner, cols, false);
  if (grad) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape.record({an, bn}, on, [an, bn, on, batch, rows, inner, cols] {
      if (an->requires_grad)
        kernels::matmul_nt<T>(on->grad, bn->data, an->grad, batch, rows, cols, inner, true);
      if (bn->requires_grad)
        kernels::matmul_tn<T>(an->data, on->grad, bn->grad, batch, inner, rows, cols, true);
    });
  }
  return out;
}

template <typename T>
Tensor<T> bmm_nt(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw ShapeError("bmm_nt: cannot multiply " + to_string(a.shape()) + " by transpose of " +
                     to_string(b.shape()));
  const std::size_t batch = a.dim(0), rows = a.dim(1), inner = a.dim(2), cols = b.dim(1);
  const bool grad = any_grad(tape, {&a, &b});
  Tensor<T> out({batch, rows, cols}, T{0}, grad);
  kernels::matmul_nt<T>(a.data(), b.data(), out.data(), batch, rows, inner, cols, false);
  if (grad) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape.record({an, bn}, on, [an, bn, on, batch, rows, inner, cols] {
      // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A.
      if (an->requires_grad)
        kernels::matmul_nn<T>(on->grad, bn->data, an->grad, batch, rows, cols, inner, true);
      if (bn->requires_grad)
        kernels::matmul_tn<T>(on->grad, an->data, bn->grad, batch, cols, rows, inner, true);
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  const bool grad = any_grad(tape, {&a, &b});
  Tensor<T> out(a.shape(), T{0}, grad);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  if (grad) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape.record({an, bn}, on, [an, bn, on] {
      if (an->requires_grad) accumulate(an->grad, on->grad);
      if (bn->requires_grad) accumulate(bn->grad, on->grad);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  const bool grad = any_grad(tape, {&a, &b});
  Tensor<T> out(a.shape(), T{0}, grad);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  if (grad) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape.record({an, bn}, on, [an, bn, on] {
      if (an->requires_grad) accumulate(an->grad, on->grad);
      if (bn->requires_grad) accumulate(bn->grad, on->grad, T{-1});
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  const bool grad = any_grad(tape, {&a, &b});
  Tensor<T> out(a.shape(), T{0}, grad);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  if (grad) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape.record({an, bn}, on, [an, bn, on] {
      const std::size_t n = on->grad.size();
      if (an->requires_grad)
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->data[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->data[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  const bool grad = any_grad(tape, {&x});
  Tensor<T> out(x.shape(), T{0}, grad);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  if (grad) {
    auto xn = x.node(), on = out.node();
    tape.record({xn}, on, [xn, on, factor] { accumulate(xn->grad, on->grad, factor); });
  }
  return out;
}

template <typename T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || bias.size() != x.shape().back())
    throw ShapeError("add_bias: bias " + to_string(bias.shape()) + " does not match last axis of " +
                     to_string(x.shape()));
  const std::size_t cols = bias.size();
  const std::size_t rows = x.size() / cols;
  const bool grad = any_grad(tape, {&x, &bias});
  Tensor<T> out(x.shape(), T{0}, grad);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] + bias[c];
  if (grad) {
    auto xn = x.node(), bn = bias.node(), on = out.node();
    tape.record({xn, bn}, on, [xn, bn, on, rows, cols] {
      if (xn->requires_grad) accumulate(xn->grad, on->grad);
      if (bn->requires_grad)
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) bn->grad[c] += on->grad[r * cols + c];
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose: need 2 or 3 axes, got " + to_string(x.shape()));
  const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t rows = x.shape()[x.rank() - 2];
  const std::size_t cols = x.shape().back();
  Shape out_shape = x.shape();
  std::swap(out_shape[x.rank() - 2], out_shape[x.rank() - 1]);
  const bool grad = any_grad(tape, {&x});
  Tensor<T> out(out_shape, T{0}, grad);
  auto swap_copy = [batch, rows, cols](const std::vector<T>& src, std::vector<T>& dst,
                                       bool forward) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t in = (b * rows + r) * cols + c;
          const std::size_t tr = (b * cols + c) * rows + r;
          if (forward)
            dst[tr] = src[in];
          else
            dst[in] += src[tr];
        }
  };
  swap_copy(x.storage(), out.storage(), true);
  if (grad) {
    auto xn = x.node(), on = out.node();
    tape.record({xn}, on, [xn, on, swap_copy] { swap_copy(on->grad, xn->grad, false); });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (element_count(shape) != x.size())
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  const bool grad = any_grad(tape, {&x});
  Tensor<T> out(std::move(shape), x.storage(), grad);
  if (grad) {
    auto xn = x.node(), on = out.node();
    tape.record({xn}, on, [xn, on] { accumulate(xn->grad, on->grad); });
  }
  return out;
}

template <typename T>
Tensor<T> gather(Tape<T>& tape, const Tensor<T>& x,
                 std::shared_ptr<const std::vector<std::size_t>> index, Shape shape) {
  if (!index || index->size() != element_count(shape))
    throw ShapeError("gather: index map does not cover output shape " + to_string(shape));
  for (auto i : *index)
    if (i >= x.size()) throw ShapeError("gather: index out of range for " + to_string(x.shape()));
  const bool grad = any_grad(tape, {&x});
  Tensor<T> out(std::move(shape), T{0}, grad);
  const auto& idx = *index;
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = x[idx[i]];
  if (grad) {
    auto xn = x.node(), on = out.node();
    tape.record({xn}, on, [xn, on, index] {
      const auto& ix = *index;
      for (std::size_t i = 0; i < ix.size(); ++i) xn->grad[ix[i]] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> row_affine(Tape<T>& tape, const Tensor<T>& x, std::span<const T> scale_v,
                     std::span<const T> shift_v) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  if (scale_v.size() != rows || shift_v.size() != rows)
    throw ShapeError("row_affine: expected " + std::to_string(rows) +
                     " row coefficients for " + to_string(x.shape()));
  const bool grad = any_grad(tape, {&x});
  Tensor<T> out(x.shape(), T{0}, grad);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = x[r * cols + c] * scale_v[r] + shift_v[r];
  if (grad) {
    auto xn = x.node(), on = out.node();
    std::vector<T> s(scale_v.begin(), scale_v.end());
    tape.record({xn}, on, [xn, on, s = std::move(s), rows, cols] {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          xn->grad[r * cols + c] += on->grad[r * cols + c] * s[r];
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  const bool grad = any_grad(tape, {&x});
  Tensor<T> out(x.shape(), T{0}, grad);
  kernels::softmax_rows<T>(x.data(), out.data(), rows, cols);
  if (grad) {
    auto xn = x.node(), on = out.node();
    tape.record({xn}, on, [xn, on, rows, cols] {
      kernels::softmax_rows_backward<T>(on->data, on->grad, xn->grad, rows, cols);
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  const bool grad = any_grad(tape, {&x});
  Tensor<T> out(x.shape(), T{0}, grad);
  kernels::gelu<T>(x.data(), out.data());
  if (grad) {
    auto xn = x.node(), on = out.node();
    tape.record({xn}, on, [xn, on] {
      const double f = fault::gelu_backward_scale();
      if (f == 1.0) {
        kernels::gelu_backward<T>(xn->data, on->grad, xn->grad);
      } else {
        std::vector<T> scaled(on->grad);
        for (auto& v : scaled) v *= static_cast<T>(f);
        kernels::gelu_backward<T>(xn->data, scaled, xn->grad);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  const bool grad = any_grad(tape, {&x});
  Tensor<T> out(x.shape(), T{0}, grad);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  if (grad) {
    auto xn = x.node(), on = out.node();
    tape.record({xn}, on, [xn, on] {
      for (std::size_t i = 0; i < xn->data.size(); ++i)
        if (xn->data[i] > T{0}) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  const bool grad = any_grad(tape, {&x});
  T total{0};
  for (auto v : x.data()) total += v;
  Tensor<T> out(Shape{1}, total, grad);
  if (grad) {
    auto xn = x.node(), on = out.node();
    tape.record({xn}, on, [xn, on] {
      const T g = on->grad[0];
      for (auto& v : xn->grad) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  return scale(tape, sum(tape, x), T{1} / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
  require_same_shape("mse_loss", pred, target);
  const auto diff = sub(tape, pred, target);
  return mean(tape, mul(tape, diff, diff));
}

#define PSFORMER_INSTANTIATE(T)                                                            \
  template class Tape<T>;                                                                  \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> bmm(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> bmm_nt(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> sub(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                 \
  template Tensor<T> add_bias(Tape<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> transpose(Tape<T>&, const Tensor<T>&);                                \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                           \
  template Tensor<T> gather(Tape<T>&, const Tensor<T>&,                                    \
                            std::shared_ptr<const std::vector<std::size_t>>, Shape);       \
  template Tensor<T> row_affine(Tape<T>&, const Tensor<T>&, std::span<const T>,            \
                                std::span<const T>);                                       \
  template Tensor<T> softmax_rows(Tape<T>&, const Tensor<T>&);                             \
  template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                                     \
  template Tensor<T> relu(Tape<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mean(Tape<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mse_loss(Tape<T>&, const Tensor<T>&, const Tensor<T>&);

PSFORMER_INSTANTIATE(float)
PSFORMER_INSTANTIATE(double)

#undef PSFORMER_INSTANTIATE

}  // namespace psformer
