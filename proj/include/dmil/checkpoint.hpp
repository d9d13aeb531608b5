#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "dmil/model.hpp"

namespace dmil {

// Binary layout, all integers and floats little-endian:
//   "DMIL" | u32 version | u32 input_dim | u32 hidden_dim | u32 variant | u32 k
//   then for each tensor in ParamTensors order: u64 count | count x f64
// Max-region writes zero-length detection tensors.

inline constexpr std::array<char, 4> kCheckpointMagic = {'D', 'M', 'I', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename U>
void put_le(std::ostream& os, U value) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(value >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U)))
    throw CheckpointError("checkpoint truncated");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= U(buf[i]) << (8 * i);
  return value;
}

inline std::uint32_t variant_tag(Variant v) {
  switch (v) {
    case Variant::ClsDetRS: return 0;
    case Variant::ClsDet: return 1;
    case Variant::DBBaseline: return 2;
    case Variant::MaxRegion: return 3;
  }
  return 0;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ModelParams& p) {
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, std::uint32_t(p.input_dim()));
  detail::put_le<std::uint32_t>(os, std::uint32_t(p.hidden_dim()));
  detail::put_le<std::uint32_t>(os, detail::variant_tag(p.variant));
  detail::put_le<std::uint32_t>(os, std::uint32_t(p.k));
  for (const Matrix* t : p.tensors()) {
    detail::put_le<std::uint64_t>(os, t->size());
    for (double v : t->data()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw CheckpointError("checkpoint write failed");
}

inline ModelParams read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic)
    throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto in_dim = detail::get_le<std::uint32_t>(is);
  const auto hid_dim = detail::get_le<std::uint32_t>(is);
  const auto tag = detail::get_le<std::uint32_t>(is);
  const auto k = detail::get_le<std::uint32_t>(is);
  if (tag >= kAllVariants.size()) throw CheckpointError("unknown variant tag");
  if (k < 1) throw CheckpointError("k must be >= 1");
  ModelParams p = make_params(in_dim, hid_dim, kAllVariants[tag], int(k));
  auto ts = p.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto count = detail::get_le<std::uint64_t>(is);
    if (count != ts[i]->size())
      throw CheckpointError("tensor " + std::string(ParamTensors::kNames[i]) +
                            ": expected " + std::to_string(ts[i]->size()) + " values, found " +
                            std::to_string(count));
    for (double& v : ts[i]->data()) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
  }
  return p;
}

inline void save_checkpoint(const std::string& path, const ModelParams& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  write_checkpoint(os, p);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace dmil
