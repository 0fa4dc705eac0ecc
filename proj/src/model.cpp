#include "psformer/model.hpp"

#include <cctype>
#include <cmath>
#include <map>
#include <random>

namespace psformer {

std::string to_string(SharingMode mode) {
  switch (mode) {
    case SharingMode::InEncoder: return "in_encoder";
    case SharingMode::CrossEncoders: return "cross_encoders";
    case SharingMode::All: return "all";
    case SharingMode::None: return "none";
  }
  return "?";
}

SharingMode parse_sharing_mode(std::string_view text) {
  std::string s;
  for (char c : text) s += (c == '-') ? '_' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s == "in_encoder" || s == "inencoder") return SharingMode::InEncoder;
  if (s == "cross_encoders" || s == "crossencoders" || s == "cross_encoder") return SharingMode::CrossEncoders;
  if (s == "all") return SharingMode::All;
  if (s == "none") return SharingMode::None;
  throw ConfigError("unknown sharing mode '" + std::string(text) +
                    "' (expected in_encoder, cross_encoders, all or none)");
}

void ModelConfig::validate() const {
  if (channels == 0 || lookback == 0 || segments == 0 || horizon == 0 || encoders == 0)
    throw ConfigError("model dimensions must all be positive");
  if (lookback % segments != 0)
    throw ConfigError("segment count " + std::to_string(segments) +
                      " does not divide look-back " + std::to_string(lookback));
  if (stats_window() > lookback)
    throw ConfigError("RevIN window " + std::to_string(revin_window) + " exceeds look-back " +
                      std::to_string(lookback));
}

const char* slot_name(Slot s) {
  static constexpr const char* names[] = {"Q1", "K1", "V1", "Q2", "K2", "V2", "Final"};
  return names[static_cast<std::size_t>(s)];
}

PlacementMap PlacementMap::for_mode(SharingMode mode, std::size_t encoders) {
  PlacementMap pm;
  pm.slots.resize(encoders);
  for (std::size_t e = 0; e < encoders; ++e)
    for (std::size_t s = 0; s < kSlotCount; ++s) {
      switch (mode) {
        case SharingMode::InEncoder: pm.slots[e][s] = e; break;
        case SharingMode::CrossEncoders: pm.slots[e][s] = s; break;
        case SharingMode::All: pm.slots[e][s] = 0; break;
        case SharingMode::None: pm.slots[e][s] = e * kSlotCount + s; break;
      }
    }
  switch (mode) {
    case SharingMode::InEncoder: pm.block_count = encoders; break;
    case SharingMode::CrossEncoders: pm.block_count = kSlotCount; break;
    case SharingMode::All: pm.block_count = 1; break;
    case SharingMode::None: pm.block_count = encoders * kSlotCount; break;
  }
  return pm;
}

namespace {

// Top 53 bits of the generator mapped to [0, 1); independent of the
// standard library's distribution implementations.
double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape), T{0}, true);
  for (auto& v : t.storage()) v = static_cast<T>((2.0 * unit_uniform(rng) - 1.0) * bound);
  return t;
}

}  // namespace

template <typename T>
PSformerParams<T> PSformerParams<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  PSformerParams p;
  p.placement = PlacementMap::for_mode(cfg.sharing, cfg.encoders);
  const std::size_t N = cfg.segments;
  const double block_bound = 1.0 / std::sqrt(static_cast<double>(N));
  for (std::size_t i = 0; i < p.placement.block_count; ++i) {
    PSBlockParams<T> b;
    b.w1 = uniform_tensor<T>({N, N}, block_bound, rng);
    b.w2 = uniform_tensor<T>({N, N}, block_bound, rng);
    b.w3 = uniform_tensor<T>({N, N}, block_bound, rng);
    b.b1 = Tensor<T>({N}, T{0}, true);
    b.b2 = Tensor<T>({N}, T{0}, true);
    b.b3 = Tensor<T>({N}, T{0}, true);
    p.blocks.push_back(std::move(b));
  }
  p.head_w = uniform_tensor<T>({cfg.lookback, cfg.horizon},
                               1.0 / std::sqrt(static_cast<double>(cfg.lookback)), rng);
  p.head_b = Tensor<T>({cfg.horizon}, T{0}, true);
  return p;
}

template <typename T>
PSformerParams<T> PSformerParams<T>::zeros(const ModelConfig& cfg) {
  cfg.validate();
  PSformerParams p;
  p.placement = PlacementMap::for_mode(cfg.sharing, cfg.encoders);
  const std::size_t N = cfg.segments;
  for (std::size_t i = 0; i < p.placement.block_count; ++i) {
    PSBlockParams<T> b;
    b.w1 = Tensor<T>({N, N}, T{0}, true);
    b.w2 = Tensor<T>({N, N}, T{0}, true);
    b.w3 = Tensor<T>({N, N}, T{0}, true);
    b.b1 = Tensor<T>({N}, T{0}, true);
    b.b2 = Tensor<T>({N}, T{0}, true);
    b.b3 = Tensor<T>({N}, T{0}, true);
    p.blocks.push_back(std::move(b));
  }
  p.head_w = Tensor<T>({cfg.lookback, cfg.horizon}, T{0}, true);
  p.head_b = Tensor<T>({cfg.horizon}, T{0}, true);
  return p;
}

template <typename T>
std::vector<Tensor<T>> PSformerParams<T>::tensors() const {
  std::vector<Tensor<T>> out;
  for (const auto& b : blocks)
    for (auto& t : b.tensors()) out.push_back(t);
  out.push_back(head_w);
  out.push_back(head_b);
  return out;
}

template <typename T>
std::vector<std::string> PSformerParams<T>::tensor_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < blocks.size(); ++i)
    for (const char* n : {"w1", "b1", "w2", "b2", "w3", "b3"})
      out.push_back("block" + std::to_string(i) + "." + n);
  out.emplace_back("head.w");
  out.emplace_back("head.b");
  return out;
}

template <typename T>
void PSformerParams<T>::zero_grad() {
  for (auto& t : tensors()) t.zero_grad();
}

template <typename T>
void PSformerParams<T>::set_requires_grad(bool on) {
  for (auto& t : tensors()) t.set_requires_grad(on);
}

template <typename T>
PSformerParams<T> PSformerParams<T>::clone() const {
  PSformerParams out;
  out.placement = placement;
  auto copy = [](const Tensor<T>& t) {
    Tensor<T> c = t.clone();
    c.set_requires_grad(t.requires_grad());
    return c;
  };
  for (const auto& b : blocks)
    out.blocks.push_back({copy(b.w1), copy(b.w2), copy(b.w3), copy(b.b1), copy(b.b2), copy(b.b3)});
  out.head_w = copy(head_w);
  out.head_b = copy(head_b);
  return out;
}

template <typename T>
void PSformerParams<T>::assign_from(const PSformerParams& other) {
  auto dst = tensors();
  auto src = other.tensors();
  if (dst.size() != src.size()) throw ShapeError("assign_from: parameter sets differ in layout");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].shape() != src[i].shape())
      throw ShapeError("assign_from: shape mismatch " + to_string(dst[i].shape()) + " vs " +
                       to_string(src[i].shape()));
    std::copy(src[i].data().begin(), src[i].data().end(), dst[i].data().begin());
  }
  placement = other.placement;
}

template <typename T>
template <typename U>
PSformerParams<U> PSformerParams<T>::cast() const {
  PSformerParams<U> out;
  out.placement = placement;
  auto conv = [](const Tensor<T>& t) {
    std::vector<U> v(t.data().begin(), t.data().end());
    return Tensor<U>(t.shape(), std::move(v), t.requires_grad());
  };
  for (const auto& b : blocks)
    out.blocks.push_back({conv(b.w1), conv(b.w2), conv(b.w3), conv(b.b1), conv(b.b2), conv(b.b3)});
  out.head_w = conv(head_w);
  out.head_b = conv(head_b);
  return out;
}

ParamCount count_parameters(const ModelConfig& cfg) {
  cfg.validate();
  ParamCount c;
  const std::size_t N = cfg.segments;
  c.distinct_blocks = PlacementMap::for_mode(cfg.sharing, cfg.encoders).block_count;
  c.encoder = c.distinct_blocks * 3 * (N * N + N);
  c.head = cfg.lookback * cfg.horizon + cfg.horizon;
  c.total = c.encoder + c.head;
  return c;
}

template <typename T>
ParamCount count_parameters(const PSformerParams<T>& params) {
  ParamCount c;
  c.distinct_blocks = params.blocks.size();
  for (const auto& b : params.blocks) c.encoder += b.parameter_count();
  c.head = params.head_w.size() + params.head_b.size();
  c.total = c.encoder + c.head;
  return c;
}

template <typename T>
std::pair<Tensor<T>, RevinState<T>> revin_normalize(Tape<T>& tape, const Tensor<T>& x,
                                                   std::size_t window) {
  if (x.rank() != 3) throw ShapeError("revin_normalize: expected B×M×L, got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), M = x.dim(1), L = x.dim(2);
  if (window == 0 || window > L)
    throw ShapeError("revin_normalize: statistics window " + std::to_string(window) +
                     " outside [1, " + std::to_string(L) + "]");
  RevinState<T> st;
  st.batch = B;
  st.channels = M;
  st.mean.resize(B * M);
  st.stddev.resize(B * M);
  std::vector<T> scale_v(B * M), shift_v(B * M);
  for (std::size_t r = 0; r < B * M; ++r) {
    const T* row = x.data().data() + r * L;
    double s = 0.0;
    for (std::size_t t = L - window; t < L; ++t) s += row[t];
    const double mu = s / static_cast<double>(window);
    double ss = 0.0;
    for (std::size_t t = L - window; t < L; ++t) ss += (row[t] - mu) * (row[t] - mu);
    const double sd = std::sqrt(ss / static_cast<double>(window) + kRevinEps);
    st.mean[r] = static_cast<T>(mu);
    st.stddev[r] = static_cast<T>(sd);
    scale_v[r] = static_cast<T>(1.0 / sd);
    shift_v[r] = static_cast<T>(-mu / sd);
  }
  auto out = row_affine<T>(tape, x, scale_v, shift_v);
  return {std::move(out), std::move(st)};
}

template <typename T>
Tensor<T> revin_denormalize(Tape<T>& tape, const Tensor<T>& y, const RevinState<T>& state) {
  if (y.rank() != 3 || y.dim(0) != state.batch || y.dim(1) != state.channels)
    throw ShapeError("revin_denormalize: output " + to_string(y.shape()) +
                     " does not match RevIN state for batch " + std::to_string(state.batch) +
                     " × " + std::to_string(state.channels) + " channels");
  return row_affine<T>(tape, y, state.stddev, state.mean);
}

namespace {

void check_geometry(const char* op, const Shape& shape, std::size_t a1, std::size_t a2,
                    const ModelConfig& cfg) {
  if (cfg.segments == 0 || cfg.lookback % cfg.segments != 0)
    throw ShapeError(std::string(op) + ": segment count " + std::to_string(cfg.segments) +
                     " does not divide look-back " + std::to_string(cfg.lookback));
  if (shape.size() != 3 || shape[1] != a1 || shape[2] != a2)
    throw ShapeError(std::string(op) + ": expected (B," + std::to_string(a1) + "," +
                     std::to_string(a2) + "), got " + to_string(shape));
}

}  // namespace

template <typename T>
Tensor<T> segment_transform(Tape<T>& tape, const Tensor<T>& x, const ModelConfig& cfg) {
  check_geometry("segment_transform", x.shape(), cfg.channels, cfg.lookback, cfg);
  const std::size_t B = x.dim(0), M = cfg.channels, L = cfg.lookback, N = cfg.segments;
  const std::size_t P = cfg.patch(), C = M * P;
  auto index = std::make_shared<std::vector<std::size_t>>(B * C * N);
  auto& idx = *index;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t n = 0; n < N; ++n)
          idx[(b * C + m * P + p) * N + n] = (b * M + m) * L + n * P + p;
  return gather<T>(tape, x, std::move(index), {B, C, N});
}

template <typename T>
Tensor<T> segment_inverse(Tape<T>& tape, const Tensor<T>& s, const ModelConfig& cfg) {
  check_geometry("segment_inverse", s.shape(), cfg.segment_length(), cfg.segments, cfg);
  const std::size_t B = s.dim(0), M = cfg.channels, L = cfg.lookback, N = cfg.segments;
  const std::size_t P = cfg.patch(), C = M * P;
  auto index = std::make_shared<std::vector<std::size_t>>(B * M * L);
  auto& idx = *index;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t t = 0; t < L; ++t)
        idx[(b * M + m) * L + t] = (b * C + m * P + t % P) * N + t / P;
  return gather<T>(tape, s, std::move(index), {B, M, L});
}

template <typename T>
Tensor<T> ps_block_forward(Tape<T>& tape, const Tensor<T>& x, const PSBlockParams<T>& block) {
  const std::size_t N = block.w1.dim(0);
  if (x.shape().back() != N)
    throw ShapeError("ps_block_forward: trailing axis of " + to_string(x.shape()) +
                     " does not match block width " + std::to_string(N));
  auto h = gelu(tape, add_bias(tape, matmul(tape, x, block.w1), block.b1));
  auto r = add(tape, add_bias(tape, matmul(tape, h, block.w2), block.b2), x);
  return add_bias(tape, matmul(tape, r, block.w3), block.b3);
}

template <typename T>
Tensor<T> attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t d_k, AttentionRecord<T>* record) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape())
    throw ShapeError("attention: q/k/v shapes " + to_string(q.shape()) + ", " +
                     to_string(k.shape()) + ", " + to_string(v.shape()) + " differ");
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_k)));
  auto scores = scale(tape, bmm_nt(tape, q, k), inv_sqrt);
  auto weights = softmax_rows(tape, scores);
  if (record) {
    record->pre_softmax = scores;
    record->post_softmax = weights;
  }
  return bmm(tape, weights, v);
}

template <typename T>
Tensor<T> seg_attention(Tape<T>& tape, const Tensor<T>& x, const PSBlockParams<T>& block,
                        std::size_t d_k, AttentionRecord<T>* record) {
  auto qkv = ps_block_forward(tape, x, block);
  return attention(tape, qkv, qkv, qkv, d_k, record);
}

template <typename T>
Tensor<T> encoder_forward(Tape<T>& tape, const Tensor<T>& x, const PSformerParams<T>& params,
                          std::size_t encoder, std::size_t d_k,
                          std::vector<AttentionRecord<T>>* records) {
  if (encoder >= params.placement.slots.size())
    throw ConfigError("encoder " + std::to_string(encoder) + " has no slot mapping");
  auto block_for = [&](Slot s) -> const PSBlockParams<T>& {
    const std::size_t idx = params.placement.block(encoder, s);
    if (idx >= params.blocks.size())
      throw ConfigError(std::string("slot ") + slot_name(s) + " of encoder " +
                        std::to_string(encoder) + " maps to missing block " + std::to_string(idx));
    return params.blocks[idx];
  };

  // One PS-block evaluation per distinct block within a stage.
  auto stage = [&](const Tensor<T>& in, Slot qs, Slot ks, Slot vs, std::size_t stage_no) {
    std::map<std::size_t, Tensor<T>> evaluated;
    auto project = [&](Slot s) {
      const std::size_t idx = params.placement.block(encoder, s);
      auto it = evaluated.find(idx);
      if (it != evaluated.end()) return it->second;
      auto out = ps_block_forward(tape, in, block_for(s));
      evaluated.emplace(idx, out);
      return out;
    };
    auto q = project(qs);
    auto k = project(ks);
    auto v = project(vs);
    AttentionRecord<T> rec;
    rec.encoder = encoder;
    rec.stage = stage_no;
    auto out = attention(tape, q, k, v, d_k, records ? &rec : nullptr);
    if (records) records->push_back(std::move(rec));
    return out;
  };

  auto o1 = relu(tape, stage(x, Slot::Q1, Slot::K1, Slot::V1, 1));
  auto o2 = stage(o1, Slot::Q2, Slot::K2, Slot::V2, 2);
  return ps_block_forward(tape, add(tape, o2, x), block_for(Slot::Final));
}

template <typename T>
Tensor<T> model_forward(Tape<T>& tape, const Tensor<T>& x, const PSformerParams<T>& params,
                        const ModelConfig& cfg, std::vector<AttentionRecord<T>>* records) {
  cfg.validate();
  if (x.rank() != 3 || x.dim(1) != cfg.channels || x.dim(2) != cfg.lookback)
    throw ShapeError("model_forward: input " + to_string(x.shape()) + " does not match (B," +
                     std::to_string(cfg.channels) + "," + std::to_string(cfg.lookback) + ")");
  if (params.placement.slots.size() != cfg.encoders)
    throw ConfigError("model_forward: parameters hold " +
                      std::to_string(params.placement.slots.size()) + " encoders, config has " +
                      std::to_string(cfg.encoders));
  auto [normed, state] = revin_normalize(tape, x, cfg.stats_window());
  auto s = segment_transform(tape, normed, cfg);
  for (std::size_t e = 0; e < cfg.encoders; ++e)
    s = encoder_forward(tape, s, params, e, cfg.attention_scale_dim(), records);
  auto z = segment_inverse(tape, s, cfg);
  auto y = add_bias(tape, matmul(tape, z, params.head_w), params.head_b);
  return revin_denormalize(tape, y, state);
}

template <typename T>
std::vector<AttentionMap<T>> export_attention(const Tensor<T>& x, const PSformerParams<T>& params,
                                              const ModelConfig& cfg) {
  if (x.rank() != 3 || x.dim(0) != 1)
    throw ShapeError("export_attention: expected a single sample (1,M,L), got " +
                     to_string(x.shape()));
  Tape<T> tape;
  tape.set_recording(false);
  std::vector<AttentionRecord<T>> records;
  model_forward(tape, x, params, cfg, &records);
  std::vector<AttentionMap<T>> out;
  const std::size_t C = cfg.segment_length();
  for (const auto& r : records)
    for (bool post : {false, true}) {
      const auto& src = post ? r.post_softmax : r.pre_softmax;
      AttentionMap<T> m;
      m.encoder = r.encoder;
      m.stage = r.stage;
      m.post_softmax = post;
      m.size = C;
      m.values.assign(src.data().begin(), src.data().end());
      out.push_back(std::move(m));
    }
  return out;
}

template <typename T>
std::vector<T> channel_submatrix(const AttentionMap<T>& map, std::size_t patch,
                                 std::size_t row_channel, std::size_t col_channel) {
  if (patch == 0 || map.size % patch != 0)
    throw ShapeError("channel_submatrix: patch " + std::to_string(patch) +
                     " does not tile a map of size " + std::to_string(map.size));
  const std::size_t channels = map.size / patch;
  if (row_channel >= channels || col_channel >= channels)
    throw ShapeError("channel_submatrix: channel index out of range (have " +
                     std::to_string(channels) + ")");
  std::vector<T> out(patch * patch);
  for (std::size_t i = 0; i < patch; ++i)
    for (std::size_t j = 0; j < patch; ++j)
      out[i * patch + j] = map.at(row_channel * patch + i, col_channel * patch + j);
  return out;
}

#define PSFORMER_INSTANTIATE(T)                                                                 \
  template struct PSformerParams<T>;                                                            \
  template ParamCount count_parameters(const PSformerParams<T>&);                               \
  template std::pair<Tensor<T>, RevinState<T>> revin_normalize(Tape<T>&, const Tensor<T>&,      \
                                                               std::size_t);                    \
  template Tensor<T> revin_denormalize(Tape<T>&, const Tensor<T>&, const RevinState<T>&);       \
  template Tensor<T> segment_transform(Tape<T>&, const Tensor<T>&, const ModelConfig&);         \
  template Tensor<T> segment_inverse(Tape<T>&, const Tensor<T>&, const ModelConfig&);           \
  template Tensor<T> ps_block_forward(Tape<T>&, const Tensor<T>&, const PSBlockParams<T>&);     \
  template Tensor<T> attention(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                               std::size_t, AttentionRecord<T>*);                               \
  template Tensor<T> seg_attention(Tape<T>&, const Tensor<T>&, const PSBlockParams<T>&,         \
                                   std::size_t, AttentionRecord<T>*);                           \
  template Tensor<T> encoder_forward(Tape<T>&, const Tensor<T>&, const PSformerParams<T>&,      \
                                     std::size_t, std::size_t,                                  \
                                     std::vector<AttentionRecord<T>>*);                         \
  template Tensor<T> model_forward(Tape<T>&, const Tensor<T>&, const PSformerParams<T>&,        \
                                   const ModelConfig&, std::vector<AttentionRecord<T>>*);       \
  template std::vector<AttentionMap<T>> export_attention(const Tensor<T>&,                      \
                                                         const PSformerParams<T>&,              \
                                                         const ModelConfig&);                   \
  template std::vector<T> channel_submatrix(const AttentionMap<T>&, std::size_t, std::size_t,   \
                                            std::size_t);

PSFORMER_INSTANTIATE(float)
PSFORMER_INSTANTIATE(double)

#undef PSFORMER_INSTANTIATE

template PSformerParams<double> PSformerParams<float>::cast<double>() const;
template PSformerParams<float> PSformerParams<double>::cast<float>() const;
template PSformerParams<float> PSformerParams<float>::cast<float>() const;
template PSformerParams<double> PSformerParams<double>::cast<double>() const;

}  // namespace psformer
