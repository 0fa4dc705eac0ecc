#pragma once

// Dense tensors (1 to 3 axes, row-major) with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node; copying the handle aliases
// the storage, `clone()` makes an independent copy. Operations that touch a
// tensor with `requires_grad` append a backward rule to the Tape passed in,
// and `Tape::backward` replays those rules in reverse order.
//
// Binary elementwise ops require identical shapes. The only implicit
// expansion is `add_bias`, which adds a vector along the last axis.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace psformer {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Incompatible shapes or axis counts.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Misuse of an API contract (non-scalar loss, missing tape entry, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;  // false once produced by a recorded operation
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    check_rank(shape);
    node_->data.assign(element_count(shape), fill);
    node_->shape = std::move(shape);
    set_requires_grad(requires_grad);
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    check_rank(shape);
    if (element_count(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    set_requires_grad(requires_grad);
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& storage() { return node_->data; }
  const std::vector<T>& storage() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on && node_->grad.size() != node_->data.size())
      node_->grad.assign(node_->data.size(), T{0});
    if (!on) node_->grad.clear();
  }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T{0}); }

  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  T& at(std::size_t i, std::size_t j) { return node_->data[i * last() + j]; }
  const T& at(std::size_t i, std::size_t j) const { return node_->data[i * last() + j]; }
  T& at(std::size_t b, std::size_t i, std::size_t j) {
    return node_->data[(b * dim(1) + i) * dim(2) + j];
  }
  const T& at(std::size_t b, std::size_t i, std::size_t j) const {
    return node_->data[(b * dim(1) + i) * dim(2) + j];
  }

  /// Independent copy of the values, detached from any tape.
  Tensor clone() const {
    Tensor out(shape(), node_->data);
    return out;
  }

  bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }

  const std::shared_ptr<TensorNode<T>>& node() const noexcept { return node_; }

 private:
  static void check_rank(const Shape& shape) {
    if (shape.empty() || shape.size() > 3)
      throw ShapeError("tensors have 1 to 3 axes, got " + to_string(shape));
  }
  std::size_t last() const { return node_->shape.back(); }

  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of differentiable operations.
template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<T>>;
  using BackwardFn = std::function<void()>;

  struct Entry {
    std::vector<NodePtr> inputs;
    NodePtr output;
    BackwardFn backward;
  };

  /// Appends an operation. Every non-leaf input must already be on the tape.
  void record(std::vector<NodePtr> inputs, NodePtr output, BackwardFn backward);

  /// Propagates d(loss)/d(.) into every reachable tensor with requires_grad.
  /// Leaf gradients accumulate across calls; intermediate ones are reset.
  void backward(const Tensor<T>& loss);

  void clear() {
    entries_.clear();
    produced_.clear();
  }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }

 private:
  std::vector<Entry> entries_;
  std::unordered_set<const TensorNode<T>*> produced_;
  bool recording_ = true;
};

/// Disables recording on a tape for the lifetime of the guard.
template <typename T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape<T>& tape) : tape_(tape), prev_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~NoGradGuard() { tape_.set_recording(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>& tape_;
  bool prev_;
};

// ---- operations -----------------------------------------------------------

/// a: R×K or B×R×K, b: K×S. Leading axes of `a` are folded into rows.
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// Per-batch product, a: B×R×K, b: B×K×S.
template <typename T>
Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// Per-batch a·bᵀ, a: B×R×K, b: B×S×K.
template <typename T>
Tensor<T> bmm_nt(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);

/// x + bias broadcast along every row; bias length equals the last axis.
template <typename T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias);

/// Swaps the last two axes (rank 2 or 3).
template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x);

/// Row-major reinterpretation; element count must be preserved.
template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);

/// out[i] = x[index[i]]. Gradients scatter back through the same map.
template <typename T>
Tensor<T> gather(Tape<T>& tape, const Tensor<T>& x,
                 std::shared_ptr<const std::vector<std::size_t>> index, Shape shape);

/// out[r, :] = x[r, :] · scale[r] + shift[r] over rows of the last axis.
/// `scale` and `shift` are constants (no gradient flows into them).
template <typename T>
Tensor<T> row_affine(Tape<T>& tape, const Tensor<T>& x, std::span<const T> scale,
                     std::span<const T> shift);

/// Softmax along the last axis with per-row max subtraction.
template <typename T>
Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& x);

/// Exact GeLU, x·Φ(x).
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);

/// max(x, 0) with zero subgradient at 0.
template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x);

/// Mean squared error; `target` is treated as a constant.
template <typename T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target);

namespace fault {
/// Multiplies the GeLU backward rule by `factor`. Only for negative-control
/// tests of the gradient checker; 1.0 restores correct behaviour.
void set_gelu_backward_scale(double factor) noexcept;
double gelu_backward_scale() noexcept;
}  // namespace fault

}  // namespace psformer
