#include "psformer/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace psformer {

namespace {

constexpr std::array<char, 8> kMagic = {'P', 'S', 'F', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> data) : data_(std::move(data)) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::vector<char> data_;
  std::size_t pos_ = 0;
};

std::uint32_t sharing_code(SharingMode m) { return static_cast<std::uint32_t>(m); }

SharingMode sharing_from_code(std::uint32_t c) {
  if (c > 3) throw CheckpointError("checkpoint has unknown sharing mode " + std::to_string(c));
  return static_cast<SharingMode>(c);
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
  const auto& cfg = ckpt.config;
  Writer w;
  w.bytes(kMagic.data(), kMagic.size());
  w.u32(kCheckpointVersion);
  for (std::size_t v : {cfg.channels, cfg.lookback, cfg.segments, cfg.horizon, cfg.encoders,
                        cfg.revin_window})
    w.u64(v);
  w.u32(sharing_code(cfg.sharing));
  w.u64(ckpt.seed);
  w.u64(ckpt.params.blocks.size());
  for (const auto& enc : ckpt.params.placement.slots)
    for (auto b : enc) w.u64(b);
  const auto tensors = ckpt.params.tensors();
  w.u64(tensors.size());
  for (const auto& t : tensors) {
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (auto v : t.data()) w.f64(static_cast<double>(v));
  }
  w.u64(ckpt.note.size());
  w.bytes(ckpt.note.data(), ckpt.note.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(data));
  const std::string magic = r.bytes(kMagic.size());
  if (std::memcmp(magic.data(), kMagic.data(), kMagic.size()) != 0)
    throw CheckpointError(path.string() + " is not a PSformer checkpoint");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

  Checkpoint<T> ck;
  auto& cfg = ck.config;
  cfg.channels = r.u64();
  cfg.lookback = r.u64();
  cfg.segments = r.u64();
  cfg.horizon = r.u64();
  cfg.encoders = r.u64();
  cfg.revin_window = r.u64();
  cfg.sharing = sharing_from_code(r.u32());
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  ck.seed = r.u64();

  ck.params = PSformerParams<T>::zeros(cfg);
  const auto blocks = r.u64();
  if (blocks != ck.params.blocks.size())
    throw CheckpointError("checkpoint block count " + std::to_string(blocks) +
                          " does not match sharing mode " + to_string(cfg.sharing));
  for (auto& enc : ck.params.placement.slots)
    for (auto& b : enc) {
      b = r.u64();
      if (b >= blocks) throw CheckpointError("checkpoint placement refers to missing block");
    }

  auto tensors = ck.params.tensors();
  if (r.u64() != tensors.size()) throw CheckpointError("checkpoint tensor count mismatch");
  for (auto& t : tensors) {
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    if (shape != t.shape())
      throw CheckpointError("checkpoint tensor shape " + to_string(shape) + " expected " +
                            to_string(t.shape()));
    for (auto& v : t.storage()) v = static_cast<T>(r.f64());
  }
  ck.note = r.bytes(r.u64());
  if (!r.at_end()) throw CheckpointError("trailing bytes in checkpoint");
  return ck;
}

template void save_checkpoint(const std::filesystem::path&, const Checkpoint<float>&);
template void save_checkpoint(const std::filesystem::path&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint(const std::filesystem::path&);

}  // namespace psformer
