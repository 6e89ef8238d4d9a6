#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dat/backbone.hpp"
#include "dat/tensor.hpp"

namespace dat {

// Named-tensor container file:
//   magic "DATW", version u32, entry count u32, then per entry
//   path length u32, UTF-8 path, rank u32, dims u64 x rank, raw f64 values.
// All integers and floats little-endian.

inline constexpr std::array<char, 4> kCheckpointMagic{'D', 'A', 'T', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using TensorEntries = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> buf;
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf.data(), buf.size());
}

template <class U>
U get_le(std::istream& is, const std::string& path, const char* what) {
  std::array<unsigned char, sizeof(U)> buf;
  if (!is.read(reinterpret_cast<char*>(buf.data()), buf.size())) {
    throw FormatError("'" + path + "': truncated while reading " + what);
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_tensor_file(const std::string& path, const std::vector<std::pair<std::string, const Tensor*>>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) detail::put_le<std::uint64_t>(os, d);
    for (double v : t->values()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw FormatError("write to '" + path + "' failed");
}

inline TensorEntries read_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw FormatError("'" + path + "': bad magic, not a tensor file");
  }
  const auto version = detail::get_le<std::uint32_t>(is, path, "version");
  if (version != kCheckpointVersion) throw FormatError("'" + path + "': unsupported version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(is, path, "entry count");
  TensorEntries out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = detail::get_le<std::uint32_t>(is, path, "path length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("'" + path + "': truncated entry name");
    const auto rank = detail::get_le<std::uint32_t>(is, path, "rank");
    if (rank == 0 || rank > 16) throw FormatError("'" + path + "': entry '" + name + "' has invalid rank");
    Shape shape(rank);
    for (auto& d : shape) {
      d = detail::get_le<std::uint64_t>(is, path, "dims");
      if (d == 0) throw FormatError("'" + path + "': entry '" + name + "' has a zero dimension");
    }
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is, path, "tensor data"));
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("'" + path + "': trailing bytes after last entry");
  return out;
}

inline void save_checkpoint(const Model& model, const std::string& path) {
  std::vector<std::pair<std::string, const Tensor*>> entries;
  for (const auto& p : named_parameters(model)) entries.emplace_back(p.name, p.tensor);
  write_tensor_file(path, entries);
}

// Loads parameters into a model built from `cfg`. The file must contain exactly the model's
// parameter manifest with matching shapes; otherwise nothing is returned.
inline Model load_checkpoint(const std::string& path, const ModelConfig& cfg) {
  TensorEntries entries = read_tensor_file(path);
  Model m = build_model(cfg, 0);
  std::map<std::string, Tensor*> slots;
  for (const auto& p : named_parameters(m)) slots.emplace(p.name, p.tensor);
  std::map<std::string, bool> seen;
  for (auto& [name, t] : entries) {
    auto it = slots.find(name);
    if (it == slots.end()) throw ManifestError("'" + path + "': unexpected tensor '" + name + "' for " + cfg.name);
    if (seen[name]) throw ManifestError("'" + path + "': duplicate tensor '" + name + "'");
    seen[name] = true;
    if (it->second->shape() != t.shape()) {
      throw ManifestError("'" + path + "': tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                          shape_str(it->second->shape()));
    }
    *it->second = std::move(t);
  }
  for (const auto& [name, _] : slots) {
    if (!seen.count(name)) throw ManifestError("'" + path + "': missing tensor '" + name + "'");
  }
  return m;
}

}  // namespace dat
