#pragma once

#include <array>
#include <cstdint>
#include <cstdlib>
#include <utility>
#include <vector>

#include "imbseg/errors.hpp"
#include "imbseg/volume.hpp"

namespace imbseg {

struct ComponentLabeling {
  Index3 dims{0, 0, 0};
  int connectivity = 26;
  std::vector<int> labels;        // 0 = background, 1..C component ids
  std::vector<std::size_t> sizes; // sizes[c-1] = voxel count of component c

  int component_count() const { return static_cast<int>(sizes.size()); }
};

namespace detail {

inline std::vector<std::array<int, 3>> neighbor_offsets(int connectivity) {
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw config_error("connectivity must be 6, 18, or 26");
  std::vector<std::array<int, 3>> offs;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (connectivity == 6 && manhattan > 1) continue;
        if (connectivity == 18 && manhattan > 2) continue;
        offs.push_back({dx, dy, dz});
      }
  return offs;
}

}  // namespace detail

// Flood-fill labeling; ids are assigned by first-encountered voxel in
// x-fastest scan order, so the labeling is deterministic.
inline ComponentLabeling label_components(const LabelMask& mask, int connectivity = 26) {
  const auto offs = detail::neighbor_offsets(connectivity);
  ComponentLabeling out;
  out.dims = mask.dims;
  out.connectivity = connectivity;
  out.labels.assign(mask.data.size(), 0);

  const int nx = mask.dims[0], ny = mask.dims[1], nz = mask.dims[2];
  std::vector<std::size_t> queue;
  for (std::size_t start = 0; start < mask.data.size(); ++start) {
    if (mask.data[start] == 0 || out.labels[start] != 0) continue;
    const int id = static_cast<int>(out.sizes.size()) + 1;
    std::size_t count = 0;
    queue.clear();
    queue.push_back(start);
    out.labels[start] = id;
    while (!queue.empty()) {
      const std::size_t cur = queue.back();
      queue.pop_back();
      ++count;
      const int x = static_cast<int>(cur % nx);
      const int y = static_cast<int>((cur / nx) % ny);
      const int z = static_cast<int>(cur / (static_cast<std::size_t>(nx) * ny));
      for (const auto& o : offs) {
        const int xx = x + o[0], yy = y + o[1], zz = z + o[2];
        if (xx < 0 || xx >= nx || yy < 0 || yy >= ny || zz < 0 || zz >= nz) continue;
        const std::size_t n = voxel_index(mask.dims, xx, yy, zz);
        if (mask.data[n] == 0 || out.labels[n] != 0) continue;
        out.labels[n] = id;
        queue.push_back(n);
      }
    }
    out.sizes.push_back(count);
  }
  return out;
}

struct RemoveSmallResult {
  LabelMask mask;
  int removed_count = 0;
};

// Deletes connected components strictly smaller than min_size voxels
// (min_size = 11: sizes 1..10 go, 11 stays).
inline RemoveSmallResult remove_small_components(const LabelMask& mask, std::size_t min_size = 11,
                                                 int connectivity = 26) {
  const ComponentLabeling cl = label_components(mask, connectivity);
  RemoveSmallResult out{mask, 0};
  std::vector<char> drop(cl.sizes.size(), 0);
  for (std::size_t c = 0; c < cl.sizes.size(); ++c) {
    if (cl.sizes[c] < min_size) {
      drop[c] = 1;
      ++out.removed_count;
    }
  }
  if (out.removed_count == 0) return out;
  for (std::size_t i = 0; i < out.mask.data.size(); ++i)
    if (cl.labels[i] != 0 && drop[cl.labels[i] - 1]) out.mask.data[i] = 0;
  return out;
}

}  // namespace imbseg
