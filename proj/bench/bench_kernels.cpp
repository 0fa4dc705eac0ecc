#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "psformer/kernels.hpp"
#include "psformer/model.hpp"

namespace {

using namespace psformer;
using namespace psformer::kernels;

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// C×N segment matrices times N×N block weights, batch 16, as in ETTh1 (C=112, N=32).
template <bool Parallel>
void BM_MatmulNN(benchmark::State& state) {
  const std::size_t B = 16, R = static_cast<std::size_t>(state.range(0)), K = 32, C = 32;
  auto a = random_vec(B * R * K, 1), b = random_vec(K * C, 2);
  std::vector<float> c(B * R * C);
  for (auto _ : state) {
    if constexpr (Parallel)
      omp::matmul_nn<float>(a, b, c, 1, B * R, K, C, false);
    else
      ref::matmul_nn<float>(a, b, c, 1, B * R, K, C, false);
    benchmark::DoNotOptimize(c.data());
  }
}

// Batched Q·Kᵀ score matrices (C×C).
template <bool Parallel>
void BM_MatmulNT(benchmark::State& state) {
  const std::size_t B = 16, R = static_cast<std::size_t>(state.range(0)), K = 32;
  auto a = random_vec(B * R * K, 3), b = random_vec(B * R * K, 4);
  std::vector<float> c(B * R * R);
  for (auto _ : state) {
    if constexpr (Parallel)
      omp::matmul_nt<float>(a, b, c, B, R, K, R, false);
    else
      ref::matmul_nt<float>(a, b, c, B, R, K, R, false);
    benchmark::DoNotOptimize(c.data());
  }
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const std::size_t rows = 16 * static_cast<std::size_t>(state.range(0));
  const std::size_t cols = static_cast<std::size_t>(state.range(0));
  auto x = random_vec(rows * cols, 5);
  std::vector<float> y(x.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      omp::softmax_rows<float>(x, y, rows, cols);
    else
      ref::softmax_rows<float>(x, y, rows, cols);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_Gelu(benchmark::State& state) {
  auto x = random_vec(static_cast<std::size_t>(state.range(0)), 6);
  std::vector<float> y(x.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      omp::gelu<float>(x, y);
    else
      ref::gelu<float>(x, y);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_ModelForward(benchmark::State& state) {
  kernels::set_backend(state.range(0) ? kernels::Backend::OpenMP : kernels::Backend::Serial);
  ModelConfig cfg;  // ETTh1 geometry
  auto params = PSformerParams<float>::init(cfg, 1);
  Tensor<float> x({16, cfg.channels, cfg.lookback}, random_vec(16 * cfg.channels * cfg.lookback, 7));
  for (auto _ : state) {
    Tape<float> tape;
    tape.set_recording(false);
    auto y = model_forward(tape, x, params, cfg);
    benchmark::DoNotOptimize(y.data());
  }
  kernels::set_backend(kernels::Backend::OpenMP);
}

BENCHMARK(BM_MatmulNN<false>)->Arg(112)->Arg(672);
BENCHMARK(BM_MatmulNN<true>)->Arg(112)->Arg(672);
BENCHMARK(BM_MatmulNT<false>)->Arg(112)->Arg(672);
BENCHMARK(BM_MatmulNT<true>)->Arg(112)->Arg(672);
BENCHMARK(BM_Softmax<false>)->Arg(112)->Arg(672);
BENCHMARK(BM_Softmax<true>)->Arg(112)->Arg(672);
BENCHMARK(BM_Gelu<false>)->Arg(1 << 16);
BENCHMARK(BM_Gelu<true>)->Arg(1 << 16);
BENCHMARK(BM_ModelForward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
