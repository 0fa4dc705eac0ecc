#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "psformer/optim.hpp"
#include "../support/oracle.hpp"

using namespace psformer;
using testutil::random_values;

namespace {

// Scalar bias-corrected Adam, one coordinate.
struct AdamOracle {
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g, double lr, double b1 = 0.9, double b2 = 0.999,
              double eps = 1e-8) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return theta - lr * mh / (std::sqrt(vh) + eps);
  }
};

// Σ a_i (θ_i − c_i)² + Σ sin(θ_i), accumulating its gradient into θ.grad.
struct Quadratic {
  std::vector<double> a, c;
  double operator()(Tensor<double>& th) const {
    double loss = 0.0;
    for (std::size_t i = 0; i < th.size(); ++i) {
      const double d = th[i] - c[i];
      loss += a[i] * d * d + std::sin(th[i]);
      th.grad()[i] += 2 * a[i] * d + std::cos(th[i]);
    }
    return loss;
  }
};

}  // namespace

TEST_CASE("first Adam step moves each coordinate by the learning rate against the gradient sign") {
  Tensor<double> th({4}, std::vector<double>{1.0, -2.0, 0.5, 3.0}, true);
  const std::vector<double> g{0.3, -4.0, 1e-3, -0.02};
  for (std::size_t i = 0; i < 4; ++i) th.grad()[i] = g[i];
  Adam<double> adam({.lr = 0.01});
  std::vector<Tensor<double>> ps{th};
  adam.step(ps);
  const std::vector<double> before{1.0, -2.0, 0.5, 3.0};
  for (std::size_t i = 0; i < 4; ++i) {
    const double want = before[i] - 0.01 * g[i] / (std::abs(g[i]) + 1e-8);
    CHECK(th[i] == doctest::Approx(want).epsilon(1e-15));
    CHECK(std::abs(th[i] - before[i]) == doctest::Approx(0.01).epsilon(1e-4));
  }
}

TEST_CASE("Adam matches a scalar oracle over many steps") {
  Tensor<double> th({3}, std::vector<double>{0.2, -0.7, 1.5}, true);
  std::vector<AdamOracle> ref(3);
  std::vector<double> mirror{0.2, -0.7, 1.5};
  Adam<double> adam({.lr = 0.05, .beta1 = 0.8, .beta2 = 0.99, .eps = 1e-6});
  std::vector<Tensor<double>> ps{th};
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  for (int step = 0; step < 50; ++step) {
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = n(rng);
      th.grad()[i] = g;
      mirror[i] = ref[i].step(mirror[i], g, 0.05, 0.8, 0.99, 1e-6);
    }
    adam.step(ps);
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(th[i] == doctest::Approx(mirror[i]).epsilon(1e-13));
  CHECK(adam.steps() == 50);
}

TEST_CASE("Adam with zero gradients leaves parameters but advances the step counter") {
  Tensor<double> th({2}, std::vector<double>{1.0, 2.0}, true);
  Adam<double> adam;
  std::vector<Tensor<double>> ps{th};
  adam.step(ps);
  CHECK(th[0] == 1.0);
  CHECK(th[1] == 2.0);
  CHECK(adam.steps() == 1);
}

TEST_CASE("Adam minimizes a quadratic") {
  Tensor<double> th({3}, std::vector<double>{5.0, -5.0, 0.0}, true);
  Adam<double> adam({.lr = 0.1});
  std::vector<Tensor<double>> ps{th};
  const std::vector<double> target{1.0, 2.0, -3.0};
  for (int step = 0; step < 2000; ++step) {
    th.zero_grad();
    for (std::size_t i = 0; i < 3; ++i) th.grad()[i] = 2 * (th[i] - target[i]);
    adam.step(ps);
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(th[i] == doctest::Approx(target[i]).epsilon(1e-3));
}

TEST_CASE("SAM on θ² from θ=1 with ρ=0.1 and a plain gradient step of 0.1 lands on 0.78") {
  Tensor<double> th({1}, 1.0, true);
  std::vector<Tensor<double>> ps{th};
  Sgd<double> sgd(0.1);
  auto info = sam_step<double>(ps, [&] {
    th.grad()[0] += 2 * th[0];
    return th[0] * th[0];
  }, {.rho = 0.1}, sgd);
  CHECK(th[0] == doctest::Approx(0.78).epsilon(1e-15));
  CHECK(info.loss == 1.0);
  CHECK(info.perturbed_loss == doctest::Approx(1.21).epsilon(1e-15));
  CHECK(info.grad_norm == 2.0);
  CHECK(info.perturbation_norm == doctest::Approx(0.1).epsilon(1e-15));
}

TEST_CASE("SAM with ρ=0 reproduces Adam over 100 random steps") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.1, 2.0), c(-3.0, 3.0);
  Quadratic q;
  for (int i = 0; i < 6; ++i) {
    q.a.push_back(u(rng));
    q.c.push_back(c(rng));
  }
  auto init = random_values<double>(6, 8);
  Tensor<double> a({6}, init, true), b({6}, init, true);
  std::vector<Tensor<double>> pa{a}, pb{b};
  Adam<double> adam_a({.lr = 0.01}), adam_b({.lr = 0.01});
  double worst = 0.0;
  for (int step = 0; step < 100; ++step) {
    sam_step<double>(pa, [&] { return q(a); }, {.rho = 0.0}, adam_a);
    b.zero_grad();
    q(b);
    adam_b.step(pb);
    for (std::size_t i = 0; i < 6; ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("SAM perturbation has norm ρ and is never left on the parameters") {
  Quadratic q{{1.0, 0.5, 2.0, 0.1}, {0.3, -1.0, 2.0, 0.0}};
  Tensor<double> th({4}, std::vector<double>{1.0, 1.0, -1.0, 4.0}, true);
  std::vector<Tensor<double>> ps{th};
  for (double rho : {0.05, 0.6, 1.0}) {
    const auto before = th.storage();
    std::vector<double> seen;
    Sgd<double> frozen(0.0);
    auto info = sam_step<double>(ps, [&] {
      seen = th.storage();
      return q(th);
    }, {.rho = rho}, frozen);
    CHECK(info.perturbation_norm == doctest::Approx(rho).epsilon(1e-10));
    double moved = 0.0;
    for (std::size_t i = 0; i < 4; ++i) moved += (seen[i] - before[i]) * (seen[i] - before[i]);
    CHECK(std::sqrt(moved) == doctest::Approx(rho).epsilon(1e-10));
    CHECK(std::memcmp(th.storage().data(), before.data(), 4 * sizeof(double)) == 0);
  }
}

TEST_CASE("SAM skips the perturbation when the gradient is zero") {
  Tensor<double> th({2}, 0.0, true);
  std::vector<Tensor<double>> ps{th};
  Sgd<double> sgd(1.0);
  int calls = 0;
  auto info = sam_step<double>(ps, [&] {
    ++calls;
    return 0.0;
  }, {.rho = 0.5}, sgd);
  CHECK(calls == 1);
  CHECK(info.perturbation_norm == 0.0);
  CHECK(th[0] == 0.0);
}

TEST_CASE("global gradient norm spans every tensor") {
  Tensor<double> a({2}, 0.0, true), b({1}, 0.0, true);
  a.grad()[0] = 3.0;
  b.grad()[0] = 4.0;
  std::vector<Tensor<double>> ps{a, b};
  CHECK(global_grad_norm<double>(ps) == 5.0);
}

TEST_CASE("early stopping on flat losses stops after patience + 1 stale epochs") {
  EarlyStopping es(3);
  using D = EarlyStopping::Decision;
  CHECK(es.update(1.0) == D::Continue);
  CHECK(es.update(1.0) == D::Continue);
  CHECK(es.update(1.0) == D::Continue);
  CHECK(es.update(1.0) == D::Continue);
  CHECK(es.update(1.0) == D::Stop);
  CHECK(es.best_epoch() == 1);
}

TEST_CASE("early stopping only counts strict improvements over the best") {
  EarlyStopping es(3);
  int snapshots = 0;
  std::vector<EarlyStopping::Decision> decisions;
  for (double v : {1.0, 0.9, 0.95, 0.94, 0.93, 0.92})
    decisions.push_back(es.update(v, [&] { ++snapshots; }));
  CHECK(snapshots == 2);
  CHECK(es.best() == 0.9);
  CHECK(es.best_epoch() == 2);
  CHECK(decisions[4] == EarlyStopping::Decision::Continue);
  CHECK(decisions[5] == EarlyStopping::Decision::Stop);
  CHECK_THROWS_AS(es.update(std::nan("")), TrainingError);
}
