#pragma once

// Versioned binary checkpoint. Layout (all integers and floats little-endian):
//
//   magic      8 bytes  "PSFCKPT\0"
//   version    u32      currently 1
//   channels, lookback, segments, horizon, encoders, revin_window   u64 each
//   sharing    u32      0 in_encoder, 1 cross_encoders, 2 all, 3 none
//   seed       u64
//   blocks     u64      number of distinct PS blocks
//   placement  encoders × 7 × u64 block indices (slots Q1 K1 V1 Q2 K2 V2 Final)
//   tensors    u64      count, then per tensor: u32 rank, rank × u64 dims,
//                       prod(dims) × f64 values, in PSformerParams::tensors() order
//   note       u64 byte length + UTF-8 text (free-form key=value lines)

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "psformer/model.hpp"

namespace psformer {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  ModelConfig config;
  std::uint64_t seed = 1;
  PSformerParams<T> params;
  std::string note;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt);

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace psformer
