#pragma once

// Versioned binary container for named parameter blocks.
//
// Layout (all integers little-endian, values IEEE-754 binary64):
//   char[8]  magic "DIALCKPT"
//   u32      container version (1)
//   u32      format id (1 = generator, 2 = calibrator)
//   u32      number of dimension entries, then per entry:
//              u32 key length, key bytes, u64 value
//   u32      number of blocks, then per block:
//              u32 name length, name bytes, u64 rows, u64 cols,
//              rows*cols f64 in column-major order

#include "dialcal/autograd.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace dialcal {

enum class CheckpointFormat : std::uint32_t { Generator = 1, Calibrator = 2 };

inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'A', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct CheckpointBlock {
  std::string name;
  Matrix value;
};

struct Checkpoint {
  CheckpointFormat format = CheckpointFormat::Generator;
  std::map<std::string, std::uint64_t> dims;
  std::vector<CheckpointBlock> blocks;

  const Matrix& block(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return b.value;
    throw std::runtime_error("checkpoint has no block named " + name);
  }

  std::uint64_t dim(const std::string& key) const {
    auto it = dims.find(key);
    if (it == dims.end()) throw std::runtime_error("checkpoint header lacks dimension " + key);
    return it->second;
  }
};

namespace detail {

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated checkpoint");
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  const auto n = read_pod<std::uint32_t>(in);
  if (n > (1u << 20)) throw std::runtime_error("implausible string length in checkpoint");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("truncated checkpoint");
  return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod<std::uint32_t>(out, kCheckpointVersion);
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.format));
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.dims.size()));
  for (const auto& [k, v] : ckpt.dims) {
    detail::write_string(out, k);
    detail::write_pod<std::uint64_t>(out, v);
  }
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.blocks.size()));
  for (const auto& b : ckpt.blocks) {
    detail::write_string(out, b.name);
    detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(b.value.rows()));
    detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(b.value.cols()));
    out.write(reinterpret_cast<const char*>(b.value.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(b.value.size())));
  }
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a checkpoint file (bad magic)");
  if (detail::read_pod<std::uint32_t>(in) != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version");
  Checkpoint ckpt;
  const auto fmt = detail::read_pod<std::uint32_t>(in);
  if (fmt != 1 && fmt != 2) throw std::runtime_error("unknown checkpoint format id");
  ckpt.format = static_cast<CheckpointFormat>(fmt);
  const auto ndims = detail::read_pod<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < ndims; ++i) {
    auto key = detail::read_string(in);
    ckpt.dims[key] = detail::read_pod<std::uint64_t>(in);
  }
  const auto nblocks = detail::read_pod<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < nblocks; ++i) {
    CheckpointBlock b;
    b.name = detail::read_string(in);
    const auto rows = detail::read_pod<std::uint64_t>(in);
    const auto cols = detail::read_pod<std::uint64_t>(in);
    if (rows > (1u << 26) || cols > (1u << 26) || rows * cols > (1ull << 30))
      throw std::runtime_error("implausible block shape in checkpoint");
    b.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    in.read(reinterpret_cast<char*>(b.value.data()), static_cast<std::streamsize>(sizeof(double) * rows * cols));
    if (!in) throw std::runtime_error("truncated checkpoint block " + b.name);
    ckpt.blocks.push_back(std::move(b));
  }
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  write_checkpoint(out, ckpt);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  return read_checkpoint(in);
}

/// Copies checkpoint blocks into parameters, rejecting any shape mismatch.
inline void restore_parameters(const Checkpoint& ckpt, const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    const Matrix& v = ckpt.block(p->name);
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols())
      throw std::runtime_error("dimension mismatch for parameter " + p->name);
    p->value = v;
  }
}

inline std::vector<CheckpointBlock> snapshot_blocks(const std::vector<const Parameter*>& params) {
  std::vector<CheckpointBlock> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back({p->name, p->value});
  return out;
}

/// FNV-1a over parameter names and raw value bytes.
inline std::uint64_t parameter_checksum(const std::vector<const Parameter*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const Parameter* p : params) {
    mix(p->name.data(), p->name.size());
    mix(p->value.data(), sizeof(double) * static_cast<std::size_t>(p->value.size()));
  }
  return h;
}

}  // namespace dialcal
