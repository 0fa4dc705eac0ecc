#include "psformer/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>

#ifdef PSFORMER_HAVE_OPENMP
#include <omp.h>
#endif

namespace psformer::kernels {

namespace {

// Row bodies shared by the serial and OpenMP drivers. `item` enumerates
// (batch, row) pairs; every output element is produced by exactly one item.

template <typename T>
inline void nn_row(const T* a, const T* b, T* c, std::size_t item,
                   std::size_t rows, std::size_t inner, std::size_t cols,
                   bool accumulate) {
  const std::size_t bi = item / rows;
  const std::size_t r = item % rows;
  const T* arow = a + (bi * rows + r) * inner;
  const T* bmat = b + bi * inner * cols;
  T* crow = c + (bi * rows + r) * cols;
  if (!accumulate) std::fill(crow, crow + cols, T{0});
  for (std::size_t k = 0; k < inner; ++k) {
    const T av = arow[k];
    const T* brow = bmat + k * cols;
    for (std::size_t s = 0; s < cols; ++s) crow[s] += av * brow[s];
  }
}

template <typename T>
inline void nt_row(const T* a, const T* b, T* c, std::size_t item,
                   std::size_t rows, std::size_t inner, std::size_t cols,
                   bool accumulate) {
  const std::size_t bi = item / rows;
  const std::size_t r = item % rows;
  const T* arow = a + (bi * rows + r) * inner;
  const T* bmat = b + bi * cols * inner;
  T* crow = c + (bi * rows + r) * cols;
  for (std::size_t s = 0; s < cols; ++s) {
    const T* brow = bmat + s * inner;
    T acc{0};
    for (std::size_t k = 0; k < inner; ++k) acc += arow[k] * brow[k];
    crow[s] = accumulate ? crow[s] + acc : acc;
  }
}

template <typename T>
inline void tn_row(const T* a, const T* b, T* c, std::size_t item,
                   std::size_t rows, std::size_t inner, std::size_t cols,
                   bool accumulate) {
  const std::size_t bi = item / rows;
  const std::size_t r = item % rows;
  const T* amat = a + bi * inner * rows;
  const T* bmat = b + bi * inner * cols;
  T* crow = c + (bi * rows + r) * cols;
  if (!accumulate) std::fill(crow, crow + cols, T{0});
  for (std::size_t k = 0; k < inner; ++k) {
    const T av = amat[k * rows + r];
    const T* brow = bmat + k * cols;
    for (std::size_t s = 0; s < cols; ++s) crow[s] += av * brow[s];
  }
}

template <typename T>
inline void softmax_row(const T* x, T* y, std::size_t cols) {
  T mx = x[0];
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
  T sum{0};
  for (std::size_t j = 0; j < cols; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const T inv = T{1} / sum;
  for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
}

template <typename T>
inline void softmax_backward_row(const T* y, const T* dy, T* dx,
                                 std::size_t cols) {
  T dot{0};
  for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
  for (std::size_t j = 0; j < cols; ++j) dx[j] += y[j] * (dy[j] - dot);
}

template <typename T>
inline T gelu_value(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  return x * cdf;
}

template <typename T>
inline T gelu_derivative(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T{-0.5} * x * x) *
                static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

std::atomic<Backend> g_backend{
#ifdef PSFORMER_HAVE_OPENMP
    Backend::OpenMP
#else
    Backend::Serial
#endif
};

}  // namespace

namespace ref {

template <typename T>
void matmul_nn(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate) {
  for (std::size_t i = 0; i < batch * rows; ++i)
    nn_row(a.data(), b.data(), c.data(), i, rows, inner, cols, accumulate);
}

template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate) {
  for (std::size_t i = 0; i < batch * rows; ++i)
    nt_row(a.data(), b.data(), c.data(), i, rows, inner, cols, accumulate);
}

template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate) {
  for (std::size_t i = 0; i < batch * rows; ++i)
    tn_row(a.data(), b.data(), c.data(), i, rows, inner, cols, accumulate);
}

template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> y, std::size_t rows,
                  std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    softmax_row(x.data() + r * cols, y.data() + r * cols, cols);
}

template <typename T>
void softmax_rows_backward(std::span<const T> y, std::span<const T> dy,
                           std::span<T> dx, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    softmax_backward_row(y.data() + r * cols, dy.data() + r * cols,
                         dx.data() + r * cols, cols);
}

template <typename T>
void gelu(std::span<const T> x, std::span<T> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_value(x[i]);
}

template <typename T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx) {
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] += dy[i] * gelu_derivative(x[i]);
}

}  // namespace ref

namespace omp {

// Signed loop counters keep the pragmas portable to OpenMP 2.x compilers.

template <typename T>
void matmul_nn(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate) {
  const auto n = static_cast<std::ptrdiff_t>(batch * rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    nn_row(a.data(), b.data(), c.data(), static_cast<std::size_t>(i), rows,
           inner, cols, accumulate);
}

template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate) {
  const auto n = static_cast<std::ptrdiff_t>(batch * rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    nt_row(a.data(), b.data(), c.data(), static_cast<std::size_t>(i), rows,
           inner, cols, accumulate);
}

template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate) {
  const auto n = static_cast<std::ptrdiff_t>(batch * rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    tn_row(a.data(), b.data(), c.data(), static_cast<std::size_t>(i), rows,
           inner, cols, accumulate);
}

template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> y, std::size_t rows,
                  std::size_t cols) {
  const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < n; ++r)
    softmax_row(x.data() + r * cols, y.data() + r * cols, cols);
}

template <typename T>
void softmax_rows_backward(std::span<const T> y, std::span<const T> dy,
                           std::span<T> dx, std::size_t rows, std::size_t cols) {
  const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < n; ++r)
    softmax_backward_row(y.data() + r * cols, dy.data() + r * cols,
                         dx.data() + r * cols, cols);
}

template <typename T>
void gelu(std::span<const T> x, std::span<T> y) {
  const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) y[i] = gelu_value(x[i]);
}

template <typename T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx) {
  const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) dx[i] += dy[i] * gelu_derivative(x[i]);
}

}  // namespace omp

Backend backend() noexcept { return g_backend.load(std::memory_order_relaxed); }

void set_backend(Backend b) noexcept {
#ifndef PSFORMER_HAVE_OPENMP
  b = Backend::Serial;
#endif
  g_backend.store(b, std::memory_order_relaxed);
}

int max_threads() noexcept {
#ifdef PSFORMER_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) noexcept {
#ifdef PSFORMER_HAVE_OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

#define PSFORMER_DISPATCH(name, ...)          \
  if (backend() == Backend::OpenMP) {         \
    omp::name<T>(__VA_ARGS__);                \
  } else {                                    \
    ref::name<T>(__VA_ARGS__);                \
  }

template <typename T>
void matmul_nn(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate) {
  PSFORMER_DISPATCH(matmul_nn, a, b, c, batch, rows, inner, cols, accumulate)
}

template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate) {
  PSFORMER_DISPATCH(matmul_nt, a, b, c, batch, rows, inner, cols, accumulate)
}

template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate) {
  PSFORMER_DISPATCH(matmul_tn, a, b, c, batch, rows, inner, cols, accumulate)
}

template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> y, std::size_t rows,
                  std::size_t cols) {
  PSFORMER_DISPATCH(softmax_rows, x, y, rows, cols)
}

template <typename T>
void softmax_rows_backward(std::span<const T> y, std::span<const T> dy,
                           std::span<T> dx, std::size_t rows, std::size_t cols) {
  PSFORMER_DISPATCH(softmax_rows_backward, y, dy, dx, rows, cols)
}

template <typename T>
void gelu(std::span<const T> x, std::span<T> y) {
  PSFORMER_DISPATCH(gelu, x, y)
}

template <typename T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx) {
  PSFORMER_DISPATCH(gelu_backward, x, dy, dx)
}

#undef PSFORMER_DISPATCH

#define PSFORMER_INSTANTIATE(NS, T)                                                   \
  template void NS matmul_nn<T>(std::span<const T>, std::span<const T>, std::span<T>, \
                                std::size_t, std::size_t, std::size_t, std::size_t,   \
                                bool);                                                \
  template void NS matmul_nt<T>(std::span<const T>, std::span<const T>, std::span<T>, \
                                std::size_t, std::size_t, std::size_t, std::size_t,   \
                                bool);                                                \
  template void NS matmul_tn<T>(std::span<const T>, std::span<const T>, std::span<T>, \
                                std::size_t, std::size_t, std::size_t, std::size_t,   \
                                bool);                                                \
  template void NS softmax_rows<T>(std::span<const T>, std::span<T>, std::size_t,     \
                                   std::size_t);                                      \
  template void NS softmax_rows_backward<T>(std::span<const T>, std::span<const T>,   \
                                            std::span<T>, std::size_t, std::size_t);  \
  template void NS gelu<T>(std::span<const T>, std::span<T>);                         \
  template void NS gelu_backward<T>(std::span<const T>, std::span<const T>,           \
                                    std::span<T>);

PSFORMER_INSTANTIATE(ref::, float)
PSFORMER_INSTANTIATE(ref::, double)
PSFORMER_INSTANTIATE(omp::, float)
PSFORMER_INSTANTIATE(omp::, double)
PSFORMER_INSTANTIATE(, float)
PSFORMER_INSTANTIATE(, double)

#undef PSFORMER_INSTANTIATE

}  // namespace psformer::kernels
