#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "imbseg/errors.hpp"

namespace imbseg {

using Index3 = std::array<int, 3>;
using Spacing3 = std::array<double, 3>;

// Array layout convention, used by every grid in this library:
// x-fastest storage, data[x + nx*(y + ny*z)]. File I/O writes the buffer
// as-is, which matches the NIfTI-1 on-disk order.
inline std::size_t voxel_index(const Index3& dims, int x, int y, int z) {
  return static_cast<std::size_t>(x) +
         static_cast<std::size_t>(dims[0]) *
             (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(z));
}

inline std::size_t voxel_count(const Index3& dims) {
  return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(dims[2]);
}

inline Index3 voxel_coords(const Index3& dims, std::size_t flat) {
  const std::size_t nx = static_cast<std::size_t>(dims[0]);
  const std::size_t ny = static_cast<std::size_t>(dims[1]);
  return Index3{static_cast<int>(flat % nx), static_cast<int>((flat / nx) % ny), static_cast<int>(flat / (nx * ny))};
}

namespace detail {

inline void check_geometry(const Index3& dims, const Spacing3& spacing) {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw config_error("volume dims must be positive");
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
      throw config_error("volume spacing must be strictly positive and finite");
  }
}

}  // namespace detail

// Dense 3D scalar grid with physical spacing in mm. Immutable by convention
// after construction; all operations below return new volumes.
struct Volume {
  Index3 dims{1, 1, 1};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<double> data;

  Volume() : data(1, 0.0) {}

  Volume(const Index3& d, const Spacing3& s, std::vector<double> values) : dims(d), spacing(s), data(std::move(values)) {
    detail::check_geometry(dims, spacing);
    if (data.size() != voxel_count(dims)) throw config_error("volume data length does not match dims");
    for (double v : data)
      if (std::isnan(v)) throw config_error("volume data contains NaN");
  }

  Volume(const Index3& d, const Spacing3& s, double fill = 0.0) : dims(d), spacing(s), data(voxel_count(d), fill) {
    detail::check_geometry(dims, spacing);
    if (std::isnan(fill)) throw config_error("volume data contains NaN");
  }

  double at(int x, int y, int z) const { return data[voxel_index(dims, x, y, z)]; }
  double& at(int x, int y, int z) { return data[voxel_index(dims, x, y, z)]; }
};

// Binary grid, background=0 / foreground=1, same geometry contract as Volume.
struct LabelMask {
  Index3 dims{1, 1, 1};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> data;

  LabelMask() : data(1, 0) {}

  LabelMask(const Index3& d, const Spacing3& s, std::vector<std::uint8_t> values)
      : dims(d), spacing(s), data(std::move(values)) {
    detail::check_geometry(dims, spacing);
    if (data.size() != voxel_count(dims)) throw config_error("mask data length does not match dims");
    for (std::uint8_t v : data)
      if (v > 1) throw config_error("mask data must be 0 or 1");
  }

  LabelMask(const Index3& d, const Spacing3& s) : dims(d), spacing(s), data(voxel_count(d), 0) {
    detail::check_geometry(dims, spacing);
  }

  std::uint8_t at(int x, int y, int z) const { return data[voxel_index(dims, x, y, z)]; }
  std::uint8_t& at(int x, int y, int z) { return data[voxel_index(dims, x, y, z)]; }

  std::size_t foreground_count() const {
    std::size_t n = 0;
    for (std::uint8_t v : data) n += v;
    return n;
  }
};

// Axis-aligned box, inclusive voxel indices on both ends.
struct BoundingBox {
  Index3 lo{0, 0, 0};
  Index3 hi{0, 0, 0};

  Index3 extent() const { return {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1}; }
};

namespace detail {

inline void check_box(const BoundingBox& box, const Index3& dims) {
  for (int a = 0; a < 3; ++a) {
    if (box.lo[a] < 0 || box.lo[a] > box.hi[a] || box.hi[a] >= dims[a])
      throw config_error("bounding box out of range");
  }
}

template <class GridA, class GridB>
void require_same_geometry(const GridA& a, const GridB& b, const char* what) {
  if (a.dims != b.dims || a.spacing != b.spacing) throw config_error(std::string("geometry mismatch: ") + what);
}

}  // namespace detail

struct VolumeStats {
  double mean = 0.0;
  double stddev = 0.0;  // population formula (divide by N)
  double min = 0.0;
  double max = 0.0;
  std::size_t count = 0;
};

// Statistics over all voxels, or over mask==1 voxels when a mask is given.
inline VolumeStats volume_stats(const Volume& v, const LabelMask* mask = nullptr) {
  if (mask) {
    detail::require_same_geometry(v, *mask, "volume_stats mask");
    if (mask->foreground_count() == 0) throw config_error("empty statistics region");
  }
  VolumeStats s;
  double sum = 0.0, sum_sq = 0.0;
  s.min = std::numeric_limits<double>::infinity();
  s.max = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    if (mask && mask->data[i] == 0) continue;
    const double x = v.data[i];
    sum += x;
    sum_sq += x * x;
    s.min = std::min(s.min, x);
    s.max = std::max(s.max, x);
    ++s.count;
  }
  s.mean = sum / static_cast<double>(s.count);
  const double var = std::max(0.0, sum_sq / static_cast<double>(s.count) - s.mean * s.mean);
  s.stddev = std::sqrt(var);
  return s;
}

// Tightest box containing every voxel with |value| > 0 (exact test, the
// preprocessed inputs use exact-zero padding).
inline BoundingBox foreground_bbox(const Volume& v) {
  BoundingBox box{{v.dims[0], v.dims[1], v.dims[2]}, {-1, -1, -1}};
  for (int z = 0; z < v.dims[2]; ++z)
    for (int y = 0; y < v.dims[1]; ++y)
      for (int x = 0; x < v.dims[0]; ++x) {
        if (std::abs(v.at(x, y, z)) > 0.0) {
          box.lo = {std::min(box.lo[0], x), std::min(box.lo[1], y), std::min(box.lo[2], z)};
          box.hi = {std::max(box.hi[0], x), std::max(box.hi[1], y), std::max(box.hi[2], z)};
        }
      }
  if (box.hi[0] < 0) throw config_error("no nonzero region");
  return box;
}

namespace detail {

template <class T>
std::vector<T> crop_data(const std::vector<T>& src, const Index3& dims, const BoundingBox& box) {
  const Index3 ext = box.extent();
  std::vector<T> out(voxel_count(ext));
  std::size_t o = 0;
  for (int z = box.lo[2]; z <= box.hi[2]; ++z)
    for (int y = box.lo[1]; y <= box.hi[1]; ++y) {
      const std::size_t row = voxel_index(dims, box.lo[0], y, z);
      for (int i = 0; i < ext[0]; ++i) out[o++] = src[row + static_cast<std::size_t>(i)];
    }
  return out;
}

}  // namespace detail

inline Volume crop(const Volume& v, const BoundingBox& box) {
  detail::check_box(box, v.dims);
  return Volume(box.extent(), v.spacing, detail::crop_data(v.data, v.dims, box));
}

inline LabelMask crop(const LabelMask& m, const BoundingBox& box) {
  detail::check_box(box, m.dims);
  return LabelMask(box.extent(), m.spacing, detail::crop_data(m.data, m.dims, box));
}

// Inverse of crop: place `m` into a zero background of size `full_dims`
// with its origin at `offset`.
inline LabelMask embed(const LabelMask& m, const Index3& full_dims, const Index3& offset) {
  for (int a = 0; a < 3; ++a)
    if (offset[a] < 0 || offset[a] + m.dims[a] > full_dims[a]) throw config_error("embed offset out of range");
  LabelMask out(full_dims, m.spacing);
  for (int z = 0; z < m.dims[2]; ++z)
    for (int y = 0; y < m.dims[1]; ++y) {
      const std::size_t src = voxel_index(m.dims, 0, y, z);
      const std::size_t dst = voxel_index(full_dims, offset[0], y + offset[1], z + offset[2]);
      for (int x = 0; x < m.dims[0]; ++x) out.data[dst + static_cast<std::size_t>(x)] = m.data[src + static_cast<std::size_t>(x)];
    }
  return out;
}

inline Volume embed(const Volume& v, const Index3& full_dims, const Index3& offset) {
  for (int a = 0; a < 3; ++a)
    if (offset[a] < 0 || offset[a] + v.dims[a] > full_dims[a]) throw config_error("embed offset out of range");
  Volume out(full_dims, v.spacing, 0.0);
  for (int z = 0; z < v.dims[2]; ++z)
    for (int y = 0; y < v.dims[1]; ++y) {
      const std::size_t src = voxel_index(v.dims, 0, y, z);
      const std::size_t dst = voxel_index(full_dims, offset[0], y + offset[1], z + offset[2]);
      for (int x = 0; x < v.dims[0]; ++x) out.data[dst + static_cast<std::size_t>(x)] = v.data[src + static_cast<std::size_t>(x)];
    }
  return out;
}

}  // namespace imbseg
