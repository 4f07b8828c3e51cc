#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "unips/numkit/nn.hpp"

// Parameter checkpoint file (little-endian):
//   "UPSW" | version u32 | count u32 |
//   count x { name_len u16 | name bytes | rank u8 | extents u32[rank] | f32[numel] }

namespace unips::nk {

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get(std::istream& is) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw CheckpointError("checkpoint truncated");
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::vector<StoredTensor>& tensors) {
  os.write("UPSW", 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw CheckpointError("parameter name too long: " + t.name);
    detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.shape.size()));
    for (auto e : t.shape) detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    os.write(reinterpret_cast<const char*>(t.values.data()),
             static_cast<std::streamsize>(t.values.size() * sizeof(float)));
  }
}

inline std::vector<StoredTensor> read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || std::memcmp(magic.data(), "UPSW", 4) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get<std::uint32_t>(is);
  std::vector<StoredTensor> out(count);
  for (auto& t : out) {
    const auto len = detail::get<std::uint16_t>(is);
    t.name.resize(len);
    if (!is.read(t.name.data(), len)) throw CheckpointError("checkpoint truncated");
    const auto rank = detail::get<std::uint8_t>(is);
    t.shape.resize(rank);
    for (auto& e : t.shape) e = detail::get<std::uint32_t>(is);
    t.values.resize(static_cast<std::size_t>(numel_of(t.shape)));
    if (!is.read(reinterpret_cast<char*>(t.values.data()),
                 static_cast<std::streamsize>(t.values.size() * sizeof(float))))
      throw CheckpointError("checkpoint truncated in " + t.name);
  }
  return out;
}

template <class T>
std::vector<StoredTensor> snapshot(const ParamList<T>& params) {
  std::vector<StoredTensor> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    StoredTensor s{p.name, p.tensor->shape(), {}};
    s.values.reserve(static_cast<std::size_t>(p.tensor->numel()));
    for (T v : p.tensor->data()) s.values.push_back(static_cast<float>(v));
    out.push_back(std::move(s));
  }
  return out;
}

/// Copies stored values into `params` by name. Every parameter must be
/// present with a matching shape.
template <class T>
void restore(ParamList<T>& params, const std::vector<StoredTensor>& stored) {
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& s : stored) by_name[s.name] = &s;
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter " + p.name);
    if (it->second->shape != p.tensor->shape())
      throw CheckpointError("shape mismatch for " + p.name + ": checkpoint " + to_string(it->second->shape) +
                            " vs model " + to_string(p.tensor->shape()));
    auto dst = p.tensor->data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
  }
}

template <class T>
void save_params(const std::string& path, const ParamList<T>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  write_checkpoint(os, snapshot(params));
  if (!os) throw CheckpointError("write failed: " + path);
}

template <class T>
void load_params(const std::string& path, ParamList<T>& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  restore(params, read_checkpoint(is));
}

}  // namespace unips::nk
