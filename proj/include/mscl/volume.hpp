#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mscl/error.hpp"

namespace mscl {

/// Dense scalar field in C order (z slowest, x fastest).
template <class V>
struct Field3 {
  std::array<std::size_t, 3> dims{0, 0, 0};
  std::vector<V> data;

  Field3() = default;
  Field3(std::size_t d0, std::size_t d1, std::size_t d2, V fill = V{})
      : dims{d0, d1, d2}, data(d0 * d1 * d2, fill) {}
  static Field3 cube(std::size_t side, V fill = V{}) { return Field3(side, side, side, fill); }

  std::size_t size() const { return data.size(); }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * dims[1] + y) * dims[2] + x; }
  V& operator()(std::size_t z, std::size_t y, std::size_t x) { return data[index(z, y, x)]; }
  const V& operator()(std::size_t z, std::size_t y, std::size_t x) const { return data[index(z, y, x)]; }
  bool same_shape(const Field3& o) const { return dims == o.dims; }
};

using Volume = Field3<float>;
using LabelVolume = Field3<int>;
using Mask = Field3<std::uint8_t>;

// Binary volume file: "MSCV", u32 version, 3 x u32 dims, f32 payload; all little-endian.

namespace io_detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
void put_le(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& is) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw DataError("volume file truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

}  // namespace io_detail

inline constexpr std::uint32_t kVolumeFormatVersion = 1;

inline void write_volume(const std::filesystem::path& path, const Volume& vol) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os.write("MSCV", 4);
  io_detail::put_le<std::uint32_t>(os, kVolumeFormatVersion);
  for (auto d : vol.dims) io_detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (float v : vol.data) io_detail::put_le<float>(os, v);
  if (!os) throw DataError("write failed: " + path.string());
}

inline Volume read_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open volume " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MSCV", 4) != 0)
    throw DataError(path.string() + ": bad magic, not a volume file");
  const auto version = io_detail::get_le<std::uint32_t>(is);
  if (version != kVolumeFormatVersion)
    throw DataError(path.string() + ": unsupported volume version " + std::to_string(version));
  std::array<std::size_t, 3> dims{};
  for (auto& d : dims) d = io_detail::get_le<std::uint32_t>(is);
  Volume vol(dims[0], dims[1], dims[2]);
  for (auto& v : vol.data) v = io_detail::get_le<float>(is);
  return vol;
}

inline Volume to_volume(const LabelVolume& labels) {
  Volume v(labels.dims[0], labels.dims[1], labels.dims[2]);
  for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = static_cast<float>(labels.data[i]);
  return v;
}

inline LabelVolume to_labels(const Volume& vol) {
  LabelVolume l(vol.dims[0], vol.dims[1], vol.dims[2]);
  for (std::size_t i = 0; i < vol.size(); ++i) l.data[i] = static_cast<int>(std::lround(vol.data[i]));
  return l;
}

}  // namespace mscl
