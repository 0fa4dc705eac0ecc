#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "psformer/kernels.hpp"
#include "../support/oracle.hpp"

using namespace psformer::kernels;
using testutil::random_values;

namespace {

template <typename T>
bool bitwise_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

// c[b] = op(a[b]) · op(b[b]) with transposes chosen by the flags.
std::vector<double> triple_loop(const std::vector<double>& a, const std::vector<double>& b,
                                std::size_t batch, std::size_t R, std::size_t K, std::size_t S,
                                bool ta, bool tb) {
  std::vector<double> c(batch * R * S, 0.0);
  for (std::size_t q = 0; q < batch; ++q)
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < S; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          const double av = ta ? a[q * K * R + k * R + i] : a[q * R * K + i * K + k];
          const double bv = tb ? b[q * S * K + j * K + k] : b[q * K * S + k * S + j];
          s += av * bv;
        }
        c[q * R * S + i * S + j] = s;
      }
  return c;
}

}  // namespace

TEST_CASE("matmul variants agree with a triple loop") {
  const std::size_t B = 3, R = 5, K = 7, S = 4;
  auto a = random_values<double>(B * R * K, 1);
  auto b = random_values<double>(B * K * S, 2);
  std::vector<double> c(B * R * S);

  ref::matmul_nn<double>(a, b, c, B, R, K, S, false);
  auto want = triple_loop(a, b, B, R, K, S, false, false);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(want[i]).epsilon(1e-14));

  ref::matmul_nt<double>(a, b, c, B, R, K, S, false);
  want = triple_loop(a, b, B, R, K, S, false, true);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(want[i]).epsilon(1e-14));

  ref::matmul_tn<double>(a, b, c, B, R, K, S, false);
  want = triple_loop(a, b, B, R, K, S, true, false);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(want[i]).epsilon(1e-14));
}

TEST_CASE("matmul accumulate adds onto the existing output") {
  std::vector<double> a{1, 2, 3, 4}, b{1, 0, 0, 1}, c{10, 10, 10, 10};
  ref::matmul_nn<double>(a, b, c, 1, 2, 2, 2, true);
  CHECK(c == std::vector<double>{11, 12, 13, 14});
  ref::matmul_nn<double>(a, b, c, 1, 2, 2, 2, false);
  CHECK(c == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE_TEMPLATE("parallel kernels are bitwise identical to the serial reference", T, float,
                   double) {
  const std::size_t B = 4, R = 37, K = 19, S = 23;
  auto a = random_values<T>(B * R * K, 3);
  auto b = random_values<T>(B * K * S, 4);
  auto bt = random_values<T>(B * S * K, 5);
  auto at = random_values<T>(B * K * R, 6);
  std::vector<T> c1(B * R * S, T(0.5)), c2(B * R * S, T(0.5));

  for (bool acc : {false, true}) {
    ref::matmul_nn<T>(a, b, c1, B, R, K, S, acc);
    omp::matmul_nn<T>(a, b, c2, B, R, K, S, acc);
    CHECK(bitwise_equal(c1, c2));
    ref::matmul_nt<T>(a, bt, c1, B, R, K, S, acc);
    omp::matmul_nt<T>(a, bt, c2, B, R, K, S, acc);
    CHECK(bitwise_equal(c1, c2));
    ref::matmul_tn<T>(at, b, c1, B, R, K, S, acc);
    omp::matmul_tn<T>(at, b, c2, B, R, K, S, acc);
    CHECK(bitwise_equal(c1, c2));
  }

  auto x = random_values<T>(R * S, 7, 4.0);
  auto dy = random_values<T>(R * S, 8);
  std::vector<T> y1(R * S), y2(R * S), d1(R * S, T(0.25)), d2(R * S, T(0.25));
  ref::softmax_rows<T>(x, y1, R, S);
  omp::softmax_rows<T>(x, y2, R, S);
  CHECK(bitwise_equal(y1, y2));
  ref::softmax_rows_backward<T>(y1, dy, d1, R, S);
  omp::softmax_rows_backward<T>(y1, dy, d2, R, S);
  CHECK(bitwise_equal(d1, d2));

  ref::gelu<T>(x, y1);
  omp::gelu<T>(x, y2);
  CHECK(bitwise_equal(y1, y2));
  ref::gelu_backward<T>(x, dy, d1);
  omp::gelu_backward<T>(x, dy, d2);
  CHECK(bitwise_equal(d1, d2));
}

TEST_CASE("parallel kernels do not depend on the thread count") {
  const std::size_t R = 64, K = 32, S = 32;
  auto a = random_values<float>(R * K, 9);
  auto b = random_values<float>(K * S, 10);
  std::vector<float> base(R * S), other(R * S);
  const int before = max_threads();
  set_threads(1);
  omp::matmul_nn<float>(a, b, base, 1, R, K, S, false);
  for (int t : {2, 3, 8}) {
    set_threads(t);
    omp::matmul_nn<float>(a, b, other, 1, R, K, S, false);
    CHECK(bitwise_equal(base, other));
  }
  set_threads(before);
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  std::vector<double> x{1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0};
  std::vector<double> y(6);
  ref::softmax_rows<double>(x, y, 2, 3);
  for (std::size_t r = 0; r < 2; ++r) {
    double s = y[r * 3] + y[r * 3 + 1] + y[r * 3 + 2];
    CHECK(std::abs(s - 1.0) < 1e-12);
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::isfinite(y[r * 3 + j]));
  }
  CHECK(y[1] > y[0]);
  CHECK(y[0] > y[2]);
}

TEST_CASE("gelu uses the exact erf form") {
  std::vector<double> x{-3.0, -1.0, 0.0, 0.5, 2.0}, y(5);
  ref::gelu<double>(x, y);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(oracle::gelu(x[i])).epsilon(1e-15));
  CHECK(y[2] == 0.0);
  std::vector<double> one{1.0}, g(1);
  ref::gelu<double>(one, g);
  CHECK(g[0] == doctest::Approx(0.8413447460685429).epsilon(1e-14));
}

TEST_CASE("backend switch routes through the selected implementation") {
  const auto before = backend();
  set_backend(Backend::Serial);
  CHECK(backend() == Backend::Serial);
  auto a = random_values<double>(6, 11), b = random_values<double>(6, 12);
  std::vector<double> c1(4), c2(4);
  matmul_nn<double>(a, b, c1, 1, 2, 3, 2, false);
  set_backend(Backend::OpenMP);
  matmul_nn<double>(a, b, c2, 1, 2, 3, 2, false);
  CHECK(bitwise_equal(c1, c2));
  set_backend(before);
}
