#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "rl4rec/binary_io.hpp"
#include "rl4rec/error.hpp"
#include "rl4rec/nn/tensor.hpp"

namespace rl4rec::nn {

// Checkpoint layout (all integers little-endian):
//   "RL4RCKPT" | u32 version | u32 n_meta | n_meta x (str key, str value)
//   | u32 n_arrays | n_arrays x (str name, u32 rank, rank x u64 dim, f64 values)
// Strings are u32 length + bytes.

inline constexpr char kCheckpointMagic[8] = {'R', 'L', '4', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<NamedArray> arrays;

  const Tensor* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a.value;
    return nullptr;
  }
  std::string meta_or(const std::string& key, const std::string& fallback = "") const {
    auto it = meta.find(key);
    return it == meta.end() ? fallback : it->second;
  }
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write(kCheckpointMagic, 8);
  io::write_u32(os, kCheckpointVersion);
  io::write_u32(os, static_cast<std::uint32_t>(ck.meta.size()));
  for (const auto& [k, v] : ck.meta) {
    io::write_str(os, k);
    io::write_str(os, v);
  }
  io::write_u32(os, static_cast<std::uint32_t>(ck.arrays.size()));
  for (const auto& a : ck.arrays) {
    io::write_str(os, a.name);
    io::write_u32(os, 2);
    io::write_u64(os, a.value.rows());
    io::write_u64(os, a.value.cols());
    for (double v : a.value.values()) io::write_f64(os, v);
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[8];
  io::read_exact(is, magic, 8);
  if (!std::equal(magic, magic + 8, kCheckpointMagic)) throw FormatError("not a checkpoint file");
  const std::uint32_t version = io::read_u32(is);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const std::uint32_t n_meta = io::read_u32(is);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = io::read_str(is);
    ck.meta[k] = io::read_str(is);
  }
  const std::uint32_t n_arrays = io::read_u32(is);
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    NamedArray a;
    a.name = io::read_str(is);
    const std::uint32_t rank = io::read_u32(is);
    if (rank == 0 || rank > 2) throw FormatError("unsupported array rank in checkpoint");
    std::uint64_t dims[2] = {1, 1};
    for (std::uint32_t r = 0; r < rank; ++r) dims[r] = io::read_u64(is);
    if (rank == 1) std::swap(dims[0], dims[1]);
    if (dims[0] * dims[1] > (std::uint64_t{1} << 32)) throw FormatError("array too large");
    std::vector<double> values(dims[0] * dims[1]);
    for (double& v : values) v = io::read_f64(is);
    a.value = Tensor(dims[0], dims[1], std::move(values));
    ck.arrays.push_back(std::move(a));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write checkpoint " + path.string());
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

inline void add_parameters(Checkpoint& ck, const std::vector<Parameter*>& params) {
  for (const Parameter* p : params) ck.arrays.push_back({p->name, p->value});
}

/// Copies arrays into parameters by name. Every parameter must be present
/// with the same shape; otherwise the checkpoint does not belong to this
/// model configuration.
inline void restore_parameters(const Checkpoint& ck, const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    const Tensor* t = ck.find(p->name);
    if (t == nullptr) throw ConfigError("checkpoint lacks parameter " + p->name);
    if (!t->same_shape(p->value)) {
      throw ConfigError("checkpoint shape mismatch for " + p->name + ": " +
                        t->shape_string() + " vs " + p->value.shape_string());
    }
    p->value = *t;
  }
}

}  // namespace rl4rec::nn
