#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "padapt/tensor.hpp"

namespace padapt {

// Named-tensor checkpoint file:
//   "PADT" | version u32 | count u64 |
//   per tensor: name_len u32 | name bytes | rank u32 | extents u64[rank] | f64[numel]
// All integers and floats little-endian.
inline constexpr char kCheckpointMagic[4] = {'P', 'A', 'D', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("checkpoint truncated while reading " + what);
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ParamStore& store) {
  os.write(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint64_t>(os, store.size());
  for (const auto& [name, t] : store) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
}

inline ParamStore read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError("not a checkpoint: bad magic");
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get<std::uint64_t>(is, "tensor count");
  ParamStore store;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::get<std::uint32_t>(is, "name length");
    if (len > (1u << 16)) throw IoError("checkpoint name length implausible");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("checkpoint truncated in tensor name");
    const auto rank = detail::get<std::uint32_t>(is, "rank of " + name);
    if (rank > 8) throw IoError("checkpoint rank implausible for " + name);
    Shape shape(rank);
    for (auto& e : shape) {
      e = detail::get<std::uint64_t>(is, "extent of " + name);
      if (e == 0 || e > (1ull << 32)) throw IoError("checkpoint extent invalid for " + name);
    }
    std::vector<double> data(shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double))))
      throw IoError("checkpoint truncated in data of " + name);
    try {
      store.add(name, Tensor(std::move(shape), std::move(data)));
    } catch (const ConfigError&) {
      throw IoError("checkpoint contains duplicate tensor " + name);
    }
  }
  return store;
}

inline void save_checkpoint(const std::string& path, const ParamStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  write_checkpoint(os, store);
  if (!os) throw IoError("failed writing checkpoint: " + path);
}

inline ParamStore load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  try {
    return read_checkpoint(is);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

inline std::uint64_t hash_store(const ParamStore& store) {
  std::ostringstream os;
  write_checkpoint(os, store);
  const std::string bytes = os.str();
  return fnv1a(bytes.data(), bytes.size());
}

}  // namespace padapt
