#pragma once

// PSformer: RevIN, segment transform, parameter-shared blocks, two-stage
// segment attention encoders and the linear forecast head.

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "psformer/tensor.hpp"

namespace psformer {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Which (encoder, slot) placements share one PS block.
enum class SharingMode {
  InEncoder,      // one block per encoder, reused at all seven slots
  CrossEncoders,  // one block per slot, reused by every encoder
  All,            // a single block everywhere
  None,           // a distinct block for every placement
};

std::string to_string(SharingMode mode);
SharingMode parse_sharing_mode(std::string_view text);

struct ModelConfig {
  std::size_t channels = 7;     // M
  std::size_t lookback = 512;   // L
  std::size_t segments = 32;    // N
  std::size_t horizon = 96;     // F
  std::size_t encoders = 1;
  SharingMode sharing = SharingMode::InEncoder;
  std::size_t revin_window = 0;  // 0 means the full look-back

  std::size_t patch() const { return lookback / segments; }             // P
  std::size_t segment_length() const { return channels * patch(); }    // C
  std::size_t attention_scale_dim() const { return segments; }         // d_k
  std::size_t stats_window() const { return revin_window == 0 ? lookback : revin_window; }

  /// Throws ConfigError when the geometry is inconsistent.
  void validate() const;
};

/// Placement slots inside one encoder.
enum class Slot : std::size_t { Q1, K1, V1, Q2, K2, V2, Final };
inline constexpr std::size_t kSlotCount = 7;
const char* slot_name(Slot s);

/// (encoder, slot) → block index.
struct PlacementMap {
  std::vector<std::array<std::size_t, kSlotCount>> slots;
  std::size_t block_count = 0;

  std::size_t block(std::size_t encoder, Slot s) const {
    return slots.at(encoder)[static_cast<std::size_t>(s)];
  }
  static PlacementMap for_mode(SharingMode mode, std::size_t encoders);
};

template <typename T>
struct PSBlockParams {
  Tensor<T> w1, w2, w3;  // N×N
  Tensor<T> b1, b2, b3;  // N

  std::size_t parameter_count() const {
    return w1.size() + w2.size() + w3.size() + b1.size() + b2.size() + b3.size();
  }
  std::vector<Tensor<T>> tensors() const { return {w1, b1, w2, b2, w3, b3}; }
};

template <typename T>
struct PSformerParams {
  std::vector<PSBlockParams<T>> blocks;
  PlacementMap placement;
  Tensor<T> head_w;  // L×F
  Tensor<T> head_b;  // F

  /// Uniform ±1/√fan_in weights, zero biases, seeded.
  static PSformerParams init(const ModelConfig& cfg, std::uint64_t seed);
  /// Zero-valued parameters with the right shapes.
  static PSformerParams zeros(const ModelConfig& cfg);

  /// Every trainable tensor: blocks in index order (w1,b1,w2,b2,w3,b3), then head.
  std::vector<Tensor<T>> tensors() const;
  /// Name per entry of tensors(), e.g. "block0.w1" or "head.w".
  std::vector<std::string> tensor_names() const;

  void zero_grad();
  void set_requires_grad(bool on);
  /// Deep copy with independent storage.
  PSformerParams clone() const;
  /// Overwrites values in place; shapes must match.
  void assign_from(const PSformerParams& other);

  template <typename U>
  PSformerParams<U> cast() const;
};

struct ParamCount {
  std::size_t total = 0;
  std::size_t encoder = 0;
  std::size_t head = 0;
  std::size_t distinct_blocks = 0;
};

/// Closed-form count for a configuration.
ParamCount count_parameters(const ModelConfig& cfg);
/// Count of the tensors actually held.
template <typename T>
ParamCount count_parameters(const PSformerParams<T>& params);

/// Per-(sample, channel) statistics captured by revin_normalize.
template <typename T>
struct RevinState {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::vector<T> mean;
  std::vector<T> stddev;  // sqrt(var + eps)
};

inline constexpr double kRevinEps = 1e-5;

/// Normalizes each (sample, channel) row of x (B×M×L) by the mean and
/// std of its trailing `window` steps. Statistics are treated as constants.
template <typename T>
std::pair<Tensor<T>, RevinState<T>> revin_normalize(Tape<T>& tape, const Tensor<T>& x,
                                                   std::size_t window);

template <typename T>
Tensor<T> revin_denormalize(Tape<T>& tape, const Tensor<T>& y, const RevinState<T>& state);

/// B×M×L → B×C×N with out[b, m·P + p, n] = x[b, m, n·P + p].
template <typename T>
Tensor<T> segment_transform(Tape<T>& tape, const Tensor<T>& x, const ModelConfig& cfg);

/// Exact inverse of segment_transform.
template <typename T>
Tensor<T> segment_inverse(Tape<T>& tape, const Tensor<T>& s, const ModelConfig& cfg);

/// (GeLU(x·W1 + b1)·W2 + b2 + x)·W3 + b3 on every length-N row.
template <typename T>
Tensor<T> ps_block_forward(Tape<T>& tape, const Tensor<T>& x, const PSBlockParams<T>& block);

/// Score matrices of one attention stage, kept for export.
template <typename T>
struct AttentionRecord {
  std::size_t encoder = 0;
  std::size_t stage = 0;  // 1 or 2
  Tensor<T> pre_softmax;   // B×C×C, already divided by √d_k
  Tensor<T> post_softmax;  // B×C×C
};

/// softmax(q·kᵀ/√d_k)·v over the C axis.
template <typename T>
Tensor<T> attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t d_k, AttentionRecord<T>* record = nullptr);

/// Segment attention with Q = K = V = ps_block_forward(x, block), evaluated once.
template <typename T>
Tensor<T> seg_attention(Tape<T>& tape, const Tensor<T>& x, const PSBlockParams<T>& block,
                        std::size_t d_k, AttentionRecord<T>* record = nullptr);

/// (Attn₂(ReLU(Attn₁(x))) + x) passed through the Final-slot block.
template <typename T>
Tensor<T> encoder_forward(Tape<T>& tape, const Tensor<T>& x, const PSformerParams<T>& params,
                          std::size_t encoder, std::size_t d_k,
                          std::vector<AttentionRecord<T>>* records = nullptr);

/// Full forecast: B×M×L → B×M×F.
template <typename T>
Tensor<T> model_forward(Tape<T>& tape, const Tensor<T>& x, const PSformerParams<T>& params,
                        const ModelConfig& cfg,
                        std::vector<AttentionRecord<T>>* records = nullptr);

/// One C×C matrix of an exported attention map.
template <typename T>
struct AttentionMap {
  std::size_t encoder = 0;
  std::size_t stage = 0;
  bool post_softmax = false;
  std::size_t size = 0;  // C
  std::vector<T> values;  // row-major C×C

  T at(std::size_t i, std::size_t j) const { return values[i * size + j]; }
};

/// Runs one sample (1×M×L) and returns n_encoders × 2 stages × {pre, post}.
template <typename T>
std::vector<AttentionMap<T>> export_attention(const Tensor<T>& x, const PSformerParams<T>& params,
                                              const ModelConfig& cfg);

/// P×P block relating rows of `row_channel` to columns of `col_channel`.
template <typename T>
std::vector<T> channel_submatrix(const AttentionMap<T>& map, std::size_t patch,
                                 std::size_t row_channel, std::size_t col_channel);

}  // namespace psformer
