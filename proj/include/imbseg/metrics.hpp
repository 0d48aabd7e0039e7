#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "imbseg/errors.hpp"
#include "imbseg/postprocess.hpp"
#include "imbseg/volume.hpp"

namespace imbseg {

// DSC = 2|P∩R| / (|P| + |R|); both masks empty counts as perfect agreement.
inline double dsc(const LabelMask& pred, const LabelMask& ref) {
  detail::require_same_geometry(pred, ref, "dsc");
  std::size_t inter = 0, p = 0, r = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    p += pred.data[i];
    r += ref.data[i];
    inter += static_cast<std::size_t>(pred.data[i] & ref.data[i]);
  }
  if (p + r == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + r);
}

// VS = 1 − ||P| − |R|| / (|P| + |R|); both empty → 1.
inline double volumetric_similarity(const LabelMask& pred, const LabelMask& ref) {
  detail::require_same_geometry(pred, ref, "volumetric_similarity");
  const double p = static_cast<double>(pred.foreground_count());
  const double r = static_cast<double>(ref.foreground_count());
  if (p + r == 0.0) return 1.0;
  return 1.0 - std::abs(p - r) / (p + r);
}

struct Hd95Result {
  double value = 0.0;
  bool defined = true;  // false when exactly one mask is empty
};

namespace detail {

// Foreground voxels with at least one background 6-neighbor; the volume
// border counts as background.
inline std::vector<std::uint8_t> surface_voxels(const LabelMask& m) {
  const int nx = m.dims[0], ny = m.dims[1], nz = m.dims[2];
  std::vector<std::uint8_t> surf(m.data.size(), 0);
  auto bg = [&](int x, int y, int z) {
    if (x < 0 || x >= nx || y < 0 || y >= ny || z < 0 || z >= nz) return true;
    return m.at(x, y, z) == 0;
  };
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        if (m.at(x, y, z) == 0) continue;
        if (bg(x - 1, y, z) || bg(x + 1, y, z) || bg(x, y - 1, z) || bg(x, y + 1, z) || bg(x, y, z - 1) ||
            bg(x, y, z + 1))
          surf[voxel_index(m.dims, x, y, z)] = 1;
      }
  return surf;
}

// Exact squared Euclidean distance (in mm, anisotropic spacing) from every
// voxel to the nearest seed voxel, by separable min-plus passes. Each 1D pass
// takes an explicit minimum over all seed offsets, so results match a
// brute-force all-pairs scan bit for bit.
inline std::vector<double> squared_distance_to(const std::vector<std::uint8_t>& seeds, const Index3& dims,
                                               const Spacing3& spacing) {
  const double inf = std::numeric_limits<double>::infinity();
  const int nx = dims[0], ny = dims[1], nz = dims[2];
  std::vector<double> d(voxel_count(dims), inf);

  // x pass: per row, squared x-distance to the nearest in-row seed.
  std::vector<int> pos;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y) {
      const std::size_t row = voxel_index(dims, 0, y, z);
      pos.clear();
      for (int x = 0; x < nx; ++x)
        if (seeds[row + x]) pos.push_back(x);
      if (pos.empty()) continue;
      for (int x = 0; x < nx; ++x) {
        double best = inf;
        for (int j : pos) {
          const double t = (static_cast<double>(x - j)) * spacing[0];
          best = std::min(best, t * t);
        }
        d[row + x] = best;
      }
    }

  // y then z pass: combine with squared distances along the remaining axes.
  auto axis_pass = [&](int n, double sp, std::size_t stride, auto base_index, std::size_t n_lines) {
    std::vector<double> line(n);
    for (std::size_t li = 0; li < n_lines; ++li) {
      const std::size_t base = base_index(li);
      for (int i = 0; i < n; ++i) line[i] = d[base + stride * i];
      for (int i = 0; i < n; ++i) {
        double best = inf;
        for (int j = 0; j < n; ++j) {
          if (line[j] == inf) continue;
          const double t = (static_cast<double>(i - j)) * sp;
          best = std::min(best, line[j] + t * t);
        }
        d[base + stride * i] = best;
      }
    }
  };
  axis_pass(ny, spacing[1], static_cast<std::size_t>(nx),
            [&](std::size_t li) {
              const std::size_t z = li / nx, x = li % nx;
              return z * static_cast<std::size_t>(nx) * ny + x;
            },
            static_cast<std::size_t>(nx) * nz);
  axis_pass(nz, spacing[2], static_cast<std::size_t>(nx) * ny, [&](std::size_t li) { return li; },
            static_cast<std::size_t>(nx) * ny);
  return d;
}

// Nearest-rank percentile (1-based rank ⌈q·n⌉) over an unsorted sample.
inline double nearest_rank_percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const std::size_t rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::max<std::size_t>(rank, 1) - 1];
}

}  // namespace detail

// Max of the two directed 95th-percentile surface distances, mm. Undefined
// (excluded from aggregation) when exactly one mask is empty; 0 when both are.
inline Hd95Result hd95(const LabelMask& pred, const LabelMask& ref) {
  detail::require_same_geometry(pred, ref, "hd95");
  const bool empty_p = pred.foreground_count() == 0;
  const bool empty_r = ref.foreground_count() == 0;
  if (empty_p && empty_r) return {0.0, true};
  if (empty_p != empty_r) return {0.0, false};

  const auto surf_p = detail::surface_voxels(pred);
  const auto surf_r = detail::surface_voxels(ref);
  const auto d2_to_p = detail::squared_distance_to(surf_p, pred.dims, pred.spacing);
  const auto d2_to_r = detail::squared_distance_to(surf_r, ref.dims, ref.spacing);

  auto directed = [&](const std::vector<std::uint8_t>& from, const std::vector<double>& d2) {
    std::vector<double> dist;
    for (std::size_t i = 0; i < from.size(); ++i)
      if (from[i]) dist.push_back(std::sqrt(d2[i]));
    return detail::nearest_rank_percentile(std::move(dist), 0.95);
  };
  return {std::max(directed(surf_p, d2_to_r), directed(surf_r, d2_to_p)), true};
}

struct CaseMetrics {
  std::string case_id;
  double dsc = 0.0;
  double hd95 = 0.0;
  bool hd95_defined = true;
  double volumetric_similarity = 0.0;
  int pred_components = 0;
  int ref_components = 0;
  bool empty_pred = false;
  bool empty_ref = false;
};

inline CaseMetrics evaluate_case(const LabelMask& pred, const LabelMask& ref) {
  detail::require_same_geometry(pred, ref, "evaluate_case");
  CaseMetrics m;
  m.dsc = dsc(pred, ref);
  const Hd95Result h = hd95(pred, ref);
  m.hd95 = h.value;
  m.hd95_defined = h.defined;
  m.volumetric_similarity = volumetric_similarity(pred, ref);
  m.pred_components = label_components(pred, 26).component_count();
  m.ref_components = label_components(ref, 26).component_count();
  m.empty_pred = pred.foreground_count() == 0;
  m.empty_ref = ref.foreground_count() == 0;
  return m;
}

struct MetricsSummary {
  int n_cases = 0;
  double mean_dsc = 0.0;
  double mean_vs = 0.0;
  double mean_hd95_defined = 0.0;  // mean over cases where hd95 is defined
  int hd95_defined_count = 0;
  int hd95_undefined_count = 0;
};

inline MetricsSummary aggregate(const std::vector<CaseMetrics>& cases) {
  if (cases.empty()) throw config_error("aggregate: empty case list");
  MetricsSummary s;
  s.n_cases = static_cast<int>(cases.size());
  double hd_sum = 0.0;
  for (const auto& c : cases) {
    s.mean_dsc += c.dsc;
    s.mean_vs += c.volumetric_similarity;
    if (c.hd95_defined) {
      hd_sum += c.hd95;
      ++s.hd95_defined_count;
    } else {
      ++s.hd95_undefined_count;
    }
  }
  s.mean_dsc /= s.n_cases;
  s.mean_vs /= s.n_cases;
  s.mean_hd95_defined = s.hd95_defined_count > 0 ? hd_sum / s.hd95_defined_count : 0.0;
  return s;
}

}  // namespace imbseg
