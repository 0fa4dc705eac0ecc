#pragma once

// Dense numeric kernels used by the autodiff layer.
//
// Every kernel exists twice: `ref::` is a plain serial loop nest kept as the
// reference for tests, `omp::` splits the same loop nest across OpenMP
// threads. The parallel versions partition over output rows only, so each
// output element is accumulated in the same order as the serial version and
// results are bitwise identical for any thread count.
//
// All buffers are row-major. Batched matmuls take `batch` contiguous
// problems laid out back to back.

#include <cstddef>
#include <span>

namespace psformer::kernels {

namespace ref {

/// c[b] (+)= a[b] · b[b], a: R×K, b: K×S, c: R×S.
template <typename T>
void matmul_nn(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate);

/// c[b] (+)= a[b] · b[b]ᵀ, a: R×K, b: S×K, c: R×S.
template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate);

/// c[b] (+)= a[b]ᵀ · b[b], a: K×R, b: K×S, c: R×S.
template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate);

template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> y, std::size_t rows,
                  std::size_t cols);

/// dx (+)= y ⊙ (dy − rowsum(dy ⊙ y)).
template <typename T>
void softmax_rows_backward(std::span<const T> y, std::span<const T> dy,
                           std::span<T> dx, std::size_t rows, std::size_t cols);

template <typename T>
void gelu(std::span<const T> x, std::span<T> y);

/// dx += dy · (Φ(x) + x·φ(x)).
template <typename T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx);

}  // namespace ref

namespace omp {

template <typename T>
void matmul_nn(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate);
template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate);
template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate);
template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> y, std::size_t rows,
                  std::size_t cols);
template <typename T>
void softmax_rows_backward(std::span<const T> y, std::span<const T> dy,
                           std::span<T> dx, std::size_t rows, std::size_t cols);
template <typename T>
void gelu(std::span<const T> x, std::span<T> y);
template <typename T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx);

}  // namespace omp

enum class Backend { Serial, OpenMP };

/// Backend used by the tensor ops. Defaults to OpenMP when compiled in.
Backend backend() noexcept;
void set_backend(Backend b) noexcept;

/// Number of worker threads the OpenMP kernels will use (1 without OpenMP).
int max_threads() noexcept;
void set_threads(int n) noexcept;

// Dispatching wrappers used by the tensor ops.
template <typename T>
void matmul_nn(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate);
template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate);
template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c,
               std::size_t batch, std::size_t rows, std::size_t inner,
               std::size_t cols, bool accumulate);
template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> y, std::size_t rows,
                  std::size_t cols);
template <typename T>
void softmax_rows_backward(std::span<const T> y, std::span<const T> dy,
                           std::span<T> dx, std::size_t rows, std::size_t cols);
template <typename T>
void gelu(std::span<const T> x, std::span<T> y);
template <typename T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx);

}  // namespace psformer::kernels
