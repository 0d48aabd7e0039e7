#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <utility>

#include "json.hpp"

#include "imbseg/errors.hpp"
#include "imbseg/volume.hpp"

namespace imbseg {

// Everything needed to invert the preprocessing chain for one case.
struct PreprocessRecord {
  Index3 original_dims{};
  BoundingBox crop_box{};
  Spacing3 original_spacing{};
  Spacing3 target_spacing{};
  double norm_mean = 0.0;
  double norm_std = 0.0;
  bool constant_image = false;
};

inline void to_json(nlohmann::json& j, const PreprocessRecord& r) {
  j = nlohmann::json{{"original_dims", r.original_dims},
                     {"crop_box", {{"lo", r.crop_box.lo}, {"hi", r.crop_box.hi}}},
                     {"original_spacing", r.original_spacing},
                     {"target_spacing", r.target_spacing},
                     {"normalization", {{"mean", r.norm_mean}, {"std", r.norm_std}, {"constant_image", r.constant_image}}}};
}

inline void from_json(const nlohmann::json& j, PreprocessRecord& r) {
  j.at("original_dims").get_to(r.original_dims);
  j.at("crop_box").at("lo").get_to(r.crop_box.lo);
  j.at("crop_box").at("hi").get_to(r.crop_box.hi);
  j.at("original_spacing").get_to(r.original_spacing);
  j.at("target_spacing").get_to(r.target_spacing);
  r.norm_mean = j.at("normalization").at("mean").get<double>();
  r.norm_std = j.at("normalization").at("std").get<double>();
  r.constant_image = j.at("normalization").at("constant_image").get<bool>();
}

struct ZscoreResult {
  Volume volume;
  double mean = 0.0;
  double stddev = 0.0;
};

// (v - mean) / max(std, 1e-8), statistics over the whole volume. A constant
// image comes out all-zero.
inline ZscoreResult zscore_normalize(const Volume& v) {
  constexpr double kStdEpsilon = 1e-8;
  const VolumeStats s = volume_stats(v);
  const double denom = std::max(s.stddev, kStdEpsilon);
  std::vector<double> out(v.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (v.data[i] - s.mean) / denom;
  return ZscoreResult{Volume(v.dims, v.spacing, std::move(out)), s.mean, s.stddev};
}

enum class ResampleMode { trilinear, nearest };

// Output grid size under the spacing change: round(dims * spacing / target),
// at least 1 per axis.
inline Index3 resampled_dims(const Index3& dims, const Spacing3& spacing, const Spacing3& target) {
  Index3 out{};
  for (int a = 0; a < 3; ++a) {
    if (!(target[a] > 0.0)) throw config_error("target spacing must be positive");
    out[a] = std::max(1, static_cast<int>(std::llround(static_cast<double>(dims[a]) * spacing[a] / target[a])));
  }
  return out;
}

namespace detail {

// Voxel-center convention: output voxel i sits at physical (i + 0.5) * target,
// which is source voxel coordinate (i + 0.5) * scale - 0.5 with
// scale = target / source. Coordinates are clamped to the valid range.
inline double source_coord(int i, double scale, int src_dim) {
  const double c = (static_cast<double>(i) + 0.5) * scale - 0.5;
  return std::clamp(c, 0.0, static_cast<double>(src_dim - 1));
}

template <class T, class Fetch>
void resample_nearest_grid(const Index3& src_dims, const Index3& out_dims, const Spacing3& scale, Fetch fetch,
                           std::vector<T>& out) {
  std::vector<int> xi(out_dims[0]);
  for (int x = 0; x < out_dims[0]; ++x)
    xi[x] = static_cast<int>(std::lround(source_coord(x, scale[0], src_dims[0])));
  std::size_t o = 0;
  for (int z = 0; z < out_dims[2]; ++z) {
    const int zi = static_cast<int>(std::lround(source_coord(z, scale[2], src_dims[2])));
    for (int y = 0; y < out_dims[1]; ++y) {
      const int yi = static_cast<int>(std::lround(source_coord(y, scale[1], src_dims[1])));
      for (int x = 0; x < out_dims[0]; ++x) out[o++] = fetch(xi[x], yi, zi);
    }
  }
}

}  // namespace detail

inline Volume resample(const Volume& v, const Spacing3& target, ResampleMode mode) {
  const Index3 out_dims = resampled_dims(v.dims, v.spacing, target);
  Spacing3 scale{};
  for (int a = 0; a < 3; ++a) scale[a] = target[a] / v.spacing[a];
  std::vector<double> out(voxel_count(out_dims));

  if (mode == ResampleMode::nearest) {
    detail::resample_nearest_grid<double>(v.dims, out_dims, scale,
                                          [&](int x, int y, int z) { return v.at(x, y, z); }, out);
    return Volume(out_dims, target, std::move(out));
  }

  // Trilinear: precompute the x-axis stencils once per row sweep.
  std::vector<int> x0(out_dims[0]);
  std::vector<double> xf(out_dims[0]);
  for (int x = 0; x < out_dims[0]; ++x) {
    const double c = detail::source_coord(x, scale[0], v.dims[0]);
    x0[x] = std::min(static_cast<int>(c), v.dims[0] - 1);
    xf[x] = c - static_cast<double>(x0[x]);
  }
  std::size_t o = 0;
  for (int z = 0; z < out_dims[2]; ++z) {
    const double cz = detail::source_coord(z, scale[2], v.dims[2]);
    const int z0 = std::min(static_cast<int>(cz), v.dims[2] - 1);
    const int z1 = std::min(z0 + 1, v.dims[2] - 1);
    const double fz = cz - static_cast<double>(z0);
    for (int y = 0; y < out_dims[1]; ++y) {
      const double cy = detail::source_coord(y, scale[1], v.dims[1]);
      const int y0 = std::min(static_cast<int>(cy), v.dims[1] - 1);
      const int y1 = std::min(y0 + 1, v.dims[1] - 1);
      const double fy = cy - static_cast<double>(y0);
      for (int x = 0; x < out_dims[0]; ++x) {
        const int xa = x0[x];
        const int xb = std::min(xa + 1, v.dims[0] - 1);
        const double fx = xf[x];
        const double c00 = v.at(xa, y0, z0) * (1 - fx) + v.at(xb, y0, z0) * fx;
        const double c10 = v.at(xa, y1, z0) * (1 - fx) + v.at(xb, y1, z0) * fx;
        const double c01 = v.at(xa, y0, z1) * (1 - fx) + v.at(xb, y0, z1) * fx;
        const double c11 = v.at(xa, y1, z1) * (1 - fx) + v.at(xb, y1, z1) * fx;
        out[o++] = (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz;
      }
    }
  }
  return Volume(out_dims, target, std::move(out));
}

// Masks always resample nearest-neighbor so the value set stays {0,1}.
inline LabelMask resample(const LabelMask& m, const Spacing3& target) {
  const Index3 out_dims = resampled_dims(m.dims, m.spacing, target);
  Spacing3 scale{};
  for (int a = 0; a < 3; ++a) scale[a] = target[a] / m.spacing[a];
  std::vector<std::uint8_t> out(voxel_count(out_dims));
  detail::resample_nearest_grid<std::uint8_t>(m.dims, out_dims, scale,
                                              [&](int x, int y, int z) { return m.at(x, y, z); }, out);
  return LabelMask(out_dims, target, std::move(out));
}

struct PreprocessedCase {
  Volume image;
  std::optional<LabelMask> mask;
  PreprocessRecord record;
};

// The paper's chain in order: crop to the nonzero region, resample to the
// target spacing, z-score normalize (image only).
inline PreprocessedCase preprocess_case(const Volume& image, const LabelMask* mask, const Spacing3& target_spacing) {
  if (mask) detail::require_same_geometry(image, *mask, "preprocess_case mask");

  PreprocessRecord rec;
  rec.original_dims = image.dims;
  rec.original_spacing = image.spacing;
  rec.target_spacing = target_spacing;
  rec.crop_box = foreground_bbox(image);

  Volume cropped = crop(image, rec.crop_box);
  Volume resampled = resample(cropped, target_spacing, ResampleMode::trilinear);
  ZscoreResult norm = zscore_normalize(resampled);
  rec.norm_mean = norm.mean;
  rec.norm_std = norm.stddev;
  rec.constant_image = norm.stddev == 0.0;

  PreprocessedCase out{std::move(norm.volume), std::nullopt, rec};
  if (mask) {
    LabelMask mc = crop(*mask, rec.crop_box);
    out.mask = resample(mc, target_spacing);
  }
  return out;
}

// Maps a mask in preprocessed geometry back to the original grid:
// nearest-neighbor resample to the cropped dims, then zero-pad to
// original_dims at the crop offset.
inline LabelMask restore_to_original(const LabelMask& mask, const PreprocessRecord& rec) {
  const Index3 crop_ext = rec.crop_box.extent();
  const Index3 expected = resampled_dims(crop_ext, rec.original_spacing, rec.target_spacing);
  if (mask.dims != expected) throw config_error("restore_to_original: mask dims do not match record");

  Spacing3 scale{};
  for (int a = 0; a < 3; ++a) scale[a] = rec.original_spacing[a] / rec.target_spacing[a];
  std::vector<std::uint8_t> out(voxel_count(crop_ext));
  detail::resample_nearest_grid<std::uint8_t>(mask.dims, crop_ext, scale,
                                              [&](int x, int y, int z) { return mask.at(x, y, z); }, out);
  LabelMask cropped(crop_ext, rec.original_spacing, std::move(out));
  return embed(cropped, rec.original_dims, rec.crop_box.lo);
}

}  // namespace imbseg
