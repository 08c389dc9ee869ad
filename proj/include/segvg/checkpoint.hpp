#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "segvg/tensor.hpp"

namespace segvg {

/// CRC-32 (IEEE 802.3 polynomial, reflected).
inline std::uint32_t crc32(const unsigned char* data, std::size_t n, std::uint32_t seed = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = seed ^ 0xffffffffu;
  for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;  // container dtype is always f32
};

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline void put_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw CheckpointError("checkpoint: truncated CRC field");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

// Row-major f32 payload as explicit little-endian bytes.
inline std::vector<unsigned char> payload_bytes(const std::vector<float>& v) {
  std::vector<unsigned char> bytes(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &v[i], 4);
    bytes[i * 4 + 0] = static_cast<unsigned char>(u & 0xff);
    bytes[i * 4 + 1] = static_cast<unsigned char>((u >> 8) & 0xff);
    bytes[i * 4 + 2] = static_cast<unsigned char>((u >> 16) & 0xff);
    bytes[i * 4 + 3] = static_cast<unsigned char>((u >> 24) & 0xff);
  }
  return bytes;
}

}  // namespace detail

/// Named-tensor container, format `SEGVG-CKPT v1`:
/// header line, then per tensor: name line, meta line `f32 <rank> <extents...>`,
/// raw little-endian row-major payload, 4-byte little-endian CRC32 of the
/// payload bytes. Round-trips bit-exactly.
inline void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("checkpoint: cannot open for write: " + path);
  os << "SEGVG-CKPT v1\n";
  for (const auto& e : entries) {
    if (e.name.find('\n') != std::string::npos)
      throw CheckpointError("checkpoint: tensor name contains newline: " + e.name);
    if (numel(e.shape) != e.data.size())
      throw CheckpointError("checkpoint: shape/data mismatch for " + e.name);
    os << e.name << '\n';
    os << "f32 " << e.shape.size();
    for (int ext : e.shape) os << ' ' << ext;
    os << '\n';
    auto bytes = detail::payload_bytes(e.data);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    detail::put_u32le(os, crc32(bytes.data(), bytes.size()));
  }
  if (!os) throw CheckpointError("checkpoint: write failed: " + path);
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open: " + path);
  std::string line;
  if (!std::getline(is, line) || line != "SEGVG-CKPT v1")
    throw CheckpointError("checkpoint: bad header in " + path);
  std::vector<CheckpointEntry> entries;
  while (std::getline(is, line)) {
    if (line.empty() && is.peek() == EOF) break;
    CheckpointEntry e;
    e.name = line;
    std::string meta;
    if (!std::getline(is, meta)) throw CheckpointError("checkpoint: missing meta line for " + e.name);
    std::istringstream ms(meta);
    std::string dtype;
    std::size_t rank = 0;
    ms >> dtype >> rank;
    if (!ms || dtype != "f32") throw CheckpointError("checkpoint: unsupported dtype '" + dtype + "' for " + e.name);
    e.shape.resize(rank);
    for (std::size_t i = 0; i < rank; ++i) {
      ms >> e.shape[i];
      if (!ms || e.shape[i] <= 0) throw CheckpointError("checkpoint: bad extents for " + e.name);
    }
    std::size_t count = numel(e.shape);
    std::vector<unsigned char> bytes(count * 4);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!is) throw CheckpointError("checkpoint: truncated payload for " + e.name);
    std::uint32_t stored = detail::get_u32le(is);
    std::uint32_t actual = crc32(bytes.data(), bytes.size());
    if (stored != actual)
      throw CheckpointError("checkpoint: CRC mismatch for " + e.name + " (stored " + std::to_string(stored) +
                            ", computed " + std::to_string(actual) + ")");
    e.data.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t u = static_cast<std::uint32_t>(bytes[i * 4 + 0]) |
                        (static_cast<std::uint32_t>(bytes[i * 4 + 1]) << 8) |
                        (static_cast<std::uint32_t>(bytes[i * 4 + 2]) << 16) |
                        (static_cast<std::uint32_t>(bytes[i * 4 + 3]) << 24);
      std::memcpy(&e.data[i], &u, 4);
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace segvg
