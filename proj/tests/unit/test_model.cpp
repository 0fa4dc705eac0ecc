#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "psformer/model.hpp"
#include "../support/oracle.hpp"

using namespace psformer;
using testutil::random_values;

namespace {

ModelConfig tiny(std::size_t M = 2, std::size_t L = 8, std::size_t N = 4, std::size_t F = 3,
                 std::size_t enc = 1, SharingMode mode = SharingMode::InEncoder) {
  ModelConfig c;
  c.channels = M;
  c.lookback = L;
  c.segments = N;
  c.horizon = F;
  c.encoders = enc;
  c.sharing = mode;
  return c;
}

template <typename T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
  const auto n = element_count(s);
  return Tensor<T>(std::move(s), random_values<T>(n, seed, scale));
}

template <typename T>
oracle::Mat sample(const Tensor<T>& t, std::size_t b) {
  const std::size_t per = t.size() / t.dim(0);
  return oracle::Mat(t.storage().begin() + b * per, t.storage().begin() + (b + 1) * per);
}

template <typename T>
double tolerance() {
  return std::is_same_v<T, float> ? 1e-6 : 1e-12;
}

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p * n + q]) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2 * a[p * n + q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i * n + i];
  return ev;
}

}  // namespace

TEST_CASE("segment transform worked example") {
  Tape<double> tape;
  auto cfg = tiny(2, 4, 2, 1);
  Tensor<double> x({1, 2, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  auto s = segment_transform(tape, x, cfg);
  REQUIRE(s.shape() == Shape{1, 4, 2});
  // Column n holds segment n: the n-th patch of every channel stacked.
  CHECK(std::vector<double>{s.at(0, 0, 0), s.at(0, 1, 0), s.at(0, 2, 0), s.at(0, 3, 0)} ==
        std::vector<double>{1, 2, 5, 6});
  CHECK(std::vector<double>{s.at(0, 0, 1), s.at(0, 1, 1), s.at(0, 2, 1), s.at(0, 3, 1)} ==
        std::vector<double>{3, 4, 7, 8});
}

TEST_CASE_TEMPLATE("segment transform is a bitwise bijection", T, float, double) {
  Tape<T> tape;
  for (auto [M, L, N] : {std::tuple{1, 4, 4}, {3, 12, 4}, {7, 64, 8}, {2, 32, 32}}) {
    auto cfg = tiny(M, L, N, 1);
    auto x = random_tensor<T>({3, cfg.channels, cfg.lookback}, 17);
    auto s = segment_transform(tape, x, cfg);
    CHECK(s.shape() == Shape{3, cfg.segment_length(), cfg.segments});
    auto back = segment_inverse(tape, s, cfg);
    CHECK(std::memcmp(back.storage().data(), x.storage().data(), x.size() * sizeof(T)) == 0);
  }
}

TEST_CASE("placement maps for every sharing mode") {
  auto in_enc = PlacementMap::for_mode(SharingMode::InEncoder, 3);
  CHECK(in_enc.block_count == 3);
  CHECK(in_enc.block(2, Slot::Q1) == 2);
  CHECK(in_enc.block(2, Slot::Final) == 2);
  auto cross = PlacementMap::for_mode(SharingMode::CrossEncoders, 3);
  CHECK(cross.block_count == 7);
  CHECK(cross.block(0, Slot::K2) == cross.block(2, Slot::K2));
  CHECK(cross.block(0, Slot::K2) != cross.block(0, Slot::Q2));
  auto all = PlacementMap::for_mode(SharingMode::All, 3);
  CHECK(all.block_count == 1);
  auto none = PlacementMap::for_mode(SharingMode::None, 3);
  CHECK(none.block_count == 21);
  std::vector<bool> used(21, false);
  for (std::size_t e = 0; e < 3; ++e)
    for (std::size_t s = 0; s < kSlotCount; ++s) used[none.block(e, static_cast<Slot>(s))] = true;
  CHECK(std::all_of(used.begin(), used.end(), [](bool b) { return b; }));
}

TEST_CASE("parameter counts match the closed form and the held tensors") {
  ModelConfig ett;
  CHECK(count_parameters(ett).total == 52416);
  CHECK(count_parameters(ett).encoder == 3168);
  CHECK(count_parameters(ett).head == 49248);
  auto h720 = ett;
  h720.horizon = 720;
  CHECK(count_parameters(h720).head == 369360);
  CHECK(count_parameters(h720).total == 372528);
  auto twelve = ett;
  twelve.encoders = 12;
  CHECK(count_parameters(twelve).total == 87264);
  auto none1 = ett, none3 = ett;
  none1.sharing = none3.sharing = SharingMode::None;
  none3.encoders = 3;
  CHECK(count_parameters(none1).total == 71424);
  CHECK(count_parameters(none3).total == 115776);
  auto all3 = ett;
  all3.encoders = 3;
  all3.sharing = SharingMode::All;
  CHECK(count_parameters(all3).encoder == 3168);

  for (auto mode : {SharingMode::InEncoder, SharingMode::CrossEncoders, SharingMode::All,
                    SharingMode::None})
    for (std::size_t enc : {1, 2, 4}) {
      auto cfg = tiny(3, 16, 4, 5, enc, mode);
      auto p = PSformerParams<float>::init(cfg, 1);
      const auto want = count_parameters(cfg);
      const auto got = count_parameters(p);
      CHECK(got.total == want.total);
      CHECK(got.distinct_blocks == want.distinct_blocks);
      std::size_t held = 0;
      for (const auto& t : p.tensors()) held += t.size();
      CHECK(held == want.total);
      CHECK(want.total == want.distinct_blocks * 3 * (16 + 4) + 16 * 5 + 5);
    }
}

TEST_CASE("initialization is seeded, bounded and leaves biases at zero") {
  auto cfg = tiny(2, 16, 8, 4, 2);
  auto a = PSformerParams<double>::init(cfg, 5);
  auto b = PSformerParams<double>::init(cfg, 5);
  auto c = PSformerParams<double>::init(cfg, 6);
  CHECK(a.blocks[1].w2.storage() == b.blocks[1].w2.storage());
  CHECK(a.blocks[1].w2.storage() != c.blocks[1].w2.storage());
  for (double v : a.blocks[0].w1.storage()) CHECK(std::abs(v) <= 1.0 / std::sqrt(8.0));
  for (double v : a.head_w.storage()) CHECK(std::abs(v) <= 1.0 / std::sqrt(16.0));
  for (double v : a.blocks[0].b3.storage()) CHECK(v == 0.0);
  CHECK(a.tensor_names().front() == "block0.w1");
  CHECK(a.tensor_names().back() == "head.b");
}

TEST_CASE("configuration validation") {
  CHECK_THROWS_AS(tiny(2, 10, 4, 1).validate(), ConfigError);
  CHECK_THROWS_AS(tiny(0, 8, 4, 1).validate(), ConfigError);
  CHECK_THROWS_AS(tiny(2, 8, 4, 1, 0).validate(), ConfigError);
  auto w = tiny(2, 8, 4, 1);
  w.revin_window = 9;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  CHECK(parse_sharing_mode("none") == SharingMode::None);
  CHECK_THROWS_AS(parse_sharing_mode("sometimes"), ConfigError);
}

TEST_CASE_TEMPLATE("RevIN normalize then denormalize is the identity", T, double) {
  for (std::size_t window : {16, 5}) {
    Tape<T> tape;
    auto x = random_tensor<T>({3, 4, 16}, 21, 10.0);
    for (auto& v : x.storage()) v += 50.0;
    auto [n, st] = revin_normalize(tape, x, window);
    auto back = revin_denormalize(tape, n, st);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(back[i] - x[i]) < 1e-10);
    // Trailing-window statistics.
    double s = 0.0;
    for (std::size_t t = 16 - window; t < 16; ++t) s += x.at(1, 2, t);
    CHECK(st.mean[1 * 4 + 2] == doctest::Approx(s / window).epsilon(1e-14));
  }
}

TEST_CASE_TEMPLATE("PS block matches the scalar oracle", T, float, double) {
  auto cfg = tiny(2, 8, 4, 3);
  auto p = PSformerParams<T>::init(cfg, 3);
  testutil::randomize_biases(p, 4);
  auto x = random_tensor<T>({2, 5, 4}, 5);
  Tape<T> tape;
  auto y = ps_block_forward(tape, x, p.blocks[0]);
  for (std::size_t b = 0; b < 2; ++b) {
    auto want = oracle::ps_block(sample(x, b), 5, oracle::from(p.blocks[0]));
    CHECK(oracle::max_rel(sample(y, b), want) < tolerance<T>());
  }
}

TEST_CASE_TEMPLATE("segment attention matches the scalar oracle", T, float, double) {
  auto cfg = tiny(2, 8, 4, 3);
  auto p = PSformerParams<T>::init(cfg, 6);
  testutil::randomize_biases(p, 7);
  auto x = random_tensor<T>({2, 4, 4}, 8);
  Tape<T> tape;
  AttentionRecord<T> rec;
  auto y = seg_attention(tape, x, p.blocks[0], 4, &rec);
  for (std::size_t b = 0; b < 2; ++b) {
    auto qkv = oracle::ps_block(sample(x, b), 4, oracle::from(p.blocks[0]));
    auto want = oracle::attention(qkv, qkv, qkv, 4, 4, 4);
    CHECK(oracle::max_rel(sample(y, b), want.out) < tolerance<T>());
    CHECK(oracle::max_rel(sample(rec.pre_softmax, b), want.scores) < tolerance<T>());
    CHECK(oracle::max_rel(sample(rec.post_softmax, b), want.weights) < tolerance<T>());
  }
}

TEST_CASE_TEMPLATE("encoder and full model match the scalar oracle", T, float, double) {
  for (auto mode : {SharingMode::InEncoder, SharingMode::CrossEncoders, SharingMode::All,
                    SharingMode::None}) {
    CAPTURE(to_string(mode));
    auto cfg = tiny(2, 8, 4, 3, 2, mode);
    auto p = PSformerParams<T>::init(cfg, 9);
    testutil::randomize_biases(p, 10);
    auto x = random_tensor<T>({2, 2, 8}, 11, 3.0);

    std::vector<oracle::Block> blocks;
    for (const auto& b : p.blocks) blocks.push_back(oracle::from(b));
    Tape<T> tape;
    auto s = random_tensor<T>({2, 4, 4}, 12);
    auto e1 = encoder_forward(tape, s, p, 1, 4);
    for (std::size_t b = 0; b < 2; ++b)
      CHECK(oracle::max_rel(sample(e1, b), oracle::encoder(sample(s, b), 4, 4, blocks, p.placement, 1)) <
            tolerance<T>());

    auto y = model_forward(tape, x, p, cfg);
    REQUIRE(y.shape() == Shape{2, 2, 3});
    for (std::size_t b = 0; b < 2; ++b)
      CHECK(oracle::max_rel(sample(y, b), oracle::model(sample(x, b), p, cfg)) < tolerance<T>());
  }
}

TEST_CASE("model with a shorter RevIN window matches the oracle") {
  auto cfg = tiny(3, 16, 4, 5);
  cfg.revin_window = 6;
  auto p = PSformerParams<double>::init(cfg, 13);
  auto x = random_tensor<double>({1, 3, 16}, 14, 2.0);
  Tape<double> tape;
  auto y = model_forward(tape, x, p, cfg);
  CHECK(oracle::max_rel(sample(y, 0), oracle::model(sample(x, 0), p, cfg)) < 1e-12);
}

TEST_CASE("softmax rows of every attention stage sum to one") {
  auto cfg = tiny(3, 16, 4, 2, 2);
  auto p = PSformerParams<double>::init(cfg, 15);
  auto x = random_tensor<double>({2, 3, 16}, 16, 5.0);
  Tape<double> tape;
  std::vector<AttentionRecord<double>> recs;
  model_forward(tape, x, p, cfg, &recs);
  REQUIRE(recs.size() == 4);
  const std::size_t C = cfg.segment_length();
  for (const auto& r : recs)
    for (std::size_t row = 0; row < r.post_softmax.size() / C; ++row) {
      double s = 0.0;
      for (std::size_t j = 0; j < C; ++j) s += r.post_softmax[row * C + j];
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("pre-softmax scores are symmetric and positive semi-definite") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto cfg = tiny(2, 16, 4, 2, 2);  // C = 8
    auto p = PSformerParams<float>::init(cfg, 20 + seed);
    testutil::randomize_biases(p, 30 + seed);
    auto x = random_tensor<float>({1, 2, 16}, 40 + seed, 3.0);
    Tape<float> tape;
    std::vector<AttentionRecord<float>> recs;
    model_forward(tape, x, p, cfg, &recs);
    const std::size_t C = 8;
    for (const auto& r : recs) {
      std::vector<double> a(C * C);
      double scale = 0.0;
      for (std::size_t i = 0; i < C * C; ++i) {
        a[i] = r.pre_softmax[i];
        scale = std::max(scale, std::abs(a[i]));
      }
      for (std::size_t i = 0; i < C; ++i)
        for (std::size_t j = 0; j < C; ++j) CHECK(std::abs(a[i * C + j] - a[j * C + i]) < 1e-5);
      const auto ev = symmetric_eigenvalues(a, C);
      CHECK(*std::min_element(ev.begin(), ev.end()) >= -1e-4 * scale);
    }
  }
}

TEST_CASE("attention output stays inside the convex hull of the values") {
  auto cfg = tiny(3, 12, 4, 2);
  auto p = PSformerParams<double>::init(cfg, 50);
  testutil::randomize_biases(p, 51);
  auto x = random_tensor<double>({2, 9, 4}, 52, 4.0);
  Tape<double> tape;
  auto v = ps_block_forward(tape, x, p.blocks[0]);
  auto y = seg_attention(tape, x, p.blocks[0], 4);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 4; ++t) {
      double lo = INFINITY, hi = -INFINITY;
      for (std::size_t j = 0; j < 9; ++j) {
        lo = std::min(lo, v.at(b, j, t));
        hi = std::max(hi, v.at(b, j, t));
      }
      for (std::size_t i = 0; i < 9; ++i) {
        CHECK(y.at(b, i, t) >= lo - 1e-12);
        CHECK(y.at(b, i, t) <= hi + 1e-12);
      }
    }
}

TEST_CASE("shared blocks alias: one tensor, summed gradients") {
  for (auto mode : {SharingMode::InEncoder, SharingMode::CrossEncoders, SharingMode::All}) {
    CAPTURE(to_string(mode));
    auto cfg = tiny(2, 8, 4, 3, 2, mode);
    auto shared = PSformerParams<double>::init(cfg, 60);
    testutil::randomize_biases(shared, 61);

    // Untied copy: every placement gets its own clone of the shared block.
    auto ucfg = cfg;
    ucfg.sharing = SharingMode::None;
    auto untied = PSformerParams<double>::zeros(ucfg);
    for (std::size_t e = 0; e < 2; ++e)
      for (std::size_t s = 0; s < kSlotCount; ++s) {
        const auto& src = shared.blocks[shared.placement.block(e, static_cast<Slot>(s))];
        auto& dst = untied.blocks[untied.placement.block(e, static_cast<Slot>(s))];
        dst.w1.storage() = src.w1.storage();
        dst.w2.storage() = src.w2.storage();
        dst.w3.storage() = src.w3.storage();
        dst.b1.storage() = src.b1.storage();
        dst.b2.storage() = src.b2.storage();
        dst.b3.storage() = src.b3.storage();
      }
    untied.head_w.storage() = shared.head_w.storage();
    untied.head_b.storage() = shared.head_b.storage();

    auto x = random_tensor<double>({2, 2, 8}, 62, 2.0);
    auto y_target = random_tensor<double>({2, 2, 3}, 63);
    auto run = [&](PSformerParams<double>& p, const ModelConfig& c) {
      p.set_requires_grad(true);
      p.zero_grad();
      Tape<double> tape;
      auto out = model_forward(tape, x, p, c);
      tape.backward(mse_loss(tape, out, y_target));
      return out.storage();
    };
    const auto out_shared = run(shared, cfg);
    const auto out_untied = run(untied, ucfg);
    for (std::size_t i = 0; i < out_shared.size(); ++i)
      CHECK(out_shared[i] == doctest::Approx(out_untied[i]).epsilon(1e-13));

    for (std::size_t k = 0; k < shared.blocks.size(); ++k) {
      std::vector<double> sum(16, 0.0);
      for (std::size_t e = 0; e < 2; ++e)
        for (std::size_t s = 0; s < kSlotCount; ++s)
          if (shared.placement.block(e, static_cast<Slot>(s)) == k) {
            auto g = untied.blocks[untied.placement.block(e, static_cast<Slot>(s))].w2.grad();
            for (std::size_t i = 0; i < 16; ++i) sum[i] += g[i];
          }
      auto g = shared.blocks[k].w2.grad();
      for (std::size_t i = 0; i < 16; ++i) CHECK(g[i] == doctest::Approx(sum[i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("attention export yields encoders × stages × {pre, post} maps") {
  auto cfg = tiny(3, 16, 4, 2, 3);
  auto p = PSformerParams<float>::init(cfg, 70);
  auto x = random_tensor<float>({1, 3, 16}, 71);
  auto maps = export_attention(x, p, cfg);
  CHECK(maps.size() == 12);
  const std::size_t C = cfg.segment_length();
  for (const auto& m : maps) {
    CHECK(m.size == C);
    CHECK(m.values.size() == C * C);
    if (!m.post_softmax) continue;
    for (std::size_t i = 0; i < C; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < C; ++j) s += m.at(i, j);
      CHECK(std::abs(s - 1.0) < 1e-5);
    }
  }
  CHECK_THROWS_AS(export_attention(random_tensor<float>({2, 3, 16}, 72), p, cfg), ShapeError);
}

TEST_CASE("single-channel submatrix of an ETTh1-shaped map is P × P") {
  ModelConfig cfg;  // M=7, L=512, N=32, P=16
  cfg.horizon = 4;
  auto p = PSformerParams<float>::init(cfg, 80);
  auto x = random_tensor<float>({1, 7, 512}, 81);
  auto maps = export_attention(x, p, cfg);
  const auto sub = channel_submatrix(maps[1], cfg.patch(), 2, 2);
  CHECK(sub.size() == 16 * 16);
  CHECK(sub[3 * 16 + 5] == maps[1].at(2 * 16 + 3, 2 * 16 + 5));
  const auto pair = channel_submatrix(maps[1], cfg.patch(), 1, 4);
  CHECK(pair[7 * 16 + 0] == maps[1].at(1 * 16 + 7, 4 * 16 + 0));
}
