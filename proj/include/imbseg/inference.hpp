#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "imbseg/checkpoint.hpp"
#include "imbseg/errors.hpp"
#include "imbseg/net.hpp"
#include "imbseg/volume.hpp"

namespace imbseg {

// Tiling with 50% overlap and a Gaussian importance map (σ = patch/8,
// peak-normalized, floored) so patch-border predictions carry less weight.
struct SlidingWindowPlan {
  Index3 patch_size{0, 0, 0};
  Index3 step{0, 0, 0};
  std::vector<Index3> origins;
  std::vector<double> importance;  // voxel_count(patch_size) weights in (0,1]
};

namespace detail {

inline std::vector<int> axis_origins(int dim, int patch, int step) {
  if (dim <= patch) return {0};
  const int span = dim - patch;
  const int n = (span + step - 1) / step + 1;
  std::vector<int> out;
  for (int i = 0; i < n; ++i) {
    const int o = std::min(i * step, span);
    if (out.empty() || out.back() != o) out.push_back(o);
  }
  return out;
}

}  // namespace detail

inline SlidingWindowPlan plan_windows(const Index3& dims, const Index3& patch_size) {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw config_error("plan_windows: dims must be >= 1");
    if (patch_size[a] < 1) throw config_error("plan_windows: patch_size must be >= 1");
  }
  SlidingWindowPlan plan;
  plan.patch_size = patch_size;
  std::array<std::vector<int>, 3> axes;
  for (int a = 0; a < 3; ++a) {
    plan.step[a] = std::max(1, patch_size[a] / 2);
    axes[a] = detail::axis_origins(dims[a], patch_size[a], plan.step[a]);
  }
  for (int oz : axes[2])
    for (int oy : axes[1])
      for (int ox : axes[0]) plan.origins.push_back({ox, oy, oz});

  plan.importance.assign(voxel_count(patch_size), 0.0);
  std::array<std::vector<double>, 3> g;
  for (int a = 0; a < 3; ++a) {
    const double sigma = static_cast<double>(patch_size[a]) / 8.0;
    const double c = (static_cast<double>(patch_size[a]) - 1.0) / 2.0;
    g[a].resize(patch_size[a]);
    for (int i = 0; i < patch_size[a]; ++i) {
      const double d = (static_cast<double>(i) - c) / sigma;
      g[a][i] = std::exp(-0.5 * d * d);
    }
  }
  double peak = 0.0;
  std::size_t o = 0;
  for (int z = 0; z < patch_size[2]; ++z)
    for (int y = 0; y < patch_size[1]; ++y)
      for (int x = 0; x < patch_size[0]; ++x) {
        const double w = g[0][x] * g[1][y] * g[2][z];
        plan.importance[o++] = w;
        peak = std::max(peak, w);
      }
  for (double& w : plan.importance) w = std::max(w / peak, 1e-3);
  return plan;
}

// Runs `model` (patch Volume -> probability Volume of the same dims) over
// every window and blends with importance weights; patches sticking out of
// the volume are zero-padded and the padding is discarded on write-back.
template <class ModelFn>
Volume predict_volume_with(const Volume& image, const SlidingWindowPlan& plan, ModelFn&& model) {
  const Index3 p = plan.patch_size;
  std::vector<double> num(image.data.size(), 0.0), den(image.data.size(), 0.0);
  Volume patch(p, image.spacing, std::vector<double>(voxel_count(p), 0.0));

  for (const Index3& org : plan.origins) {
    std::fill(patch.data.begin(), patch.data.end(), 0.0);
    const int x_lo = org[0], y_lo = org[1], z_lo = org[2];
    const int x_hi = std::min(x_lo + p[0], image.dims[0]);
    const int y_hi = std::min(y_lo + p[1], image.dims[1]);
    const int z_hi = std::min(z_lo + p[2], image.dims[2]);
    for (int z = z_lo; z < z_hi; ++z)
      for (int y = y_lo; y < y_hi; ++y) {
        const std::size_t src = voxel_index(image.dims, x_lo, y, z);
        const std::size_t dst = voxel_index(p, 0, y - y_lo, z - z_lo);
        std::copy_n(image.data.begin() + src, x_hi - x_lo, patch.data.begin() + dst);
      }

    const Volume probs = model(static_cast<const Volume&>(patch));
    if (probs.dims != p) throw config_error("predict_volume: model output dims differ from patch dims");
    for (int z = z_lo; z < z_hi; ++z)
      for (int y = y_lo; y < y_hi; ++y) {
        const std::size_t dst = voxel_index(image.dims, x_lo, y, z);
        const std::size_t src = voxel_index(p, 0, y - y_lo, z - z_lo);
        for (int x = 0; x < x_hi - x_lo; ++x) {
          num[dst + x] += plan.importance[src + x] * probs.data[src + x];
          den[dst + x] += plan.importance[src + x];
        }
      }
  }
  std::vector<double> out(image.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = num[i] / den[i];
  return Volume(image.dims, image.spacing, std::move(out));
}

inline Volume predict_volume(const ModelParams& params, const NetConfig& cfg, const Volume& image,
                             const SlidingWindowPlan& plan) {
  return predict_volume_with(image, plan,
                             [&](const Volume& patch) { return forward(params, cfg, patch).probs; });
}

inline LabelMask threshold_mask(const Volume& probs, double threshold = 0.5) {
  std::vector<std::uint8_t> out(probs.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = probs.data[i] >= threshold ? 1 : 0;
  return LabelMask(probs.dims, probs.spacing, std::move(out));
}

struct EnsembleMember {
  std::string path;
  NetConfig net;
  ModelParams params;
};

// Loads checkpoints and fixes the accumulation order by sorting on path, so
// the ensemble mean is bit-exact regardless of how members were listed.
inline std::vector<EnsembleMember> load_ensemble(std::vector<std::string> paths) {
  if (paths.empty()) throw config_error("ensemble needs at least one member");
  std::sort(paths.begin(), paths.end());
  std::vector<EnsembleMember> members;
  members.reserve(paths.size());
  for (const auto& path : paths) {
    try {
      auto [cfg, params] = load_checkpoint(path);
      members.push_back(EnsembleMember{path, cfg, std::move(params)});
    } catch (const error& e) {
      throw missing_artifact("ensemble member failed to load: " + path + " (" + e.what() + ")");
    }
  }
  return members;
}

struct EnsembleResult {
  Volume probs;
  LabelMask mask;
};

// Arithmetic mean of member foreground probabilities, thresholded at 0.5
// (ties count as foreground).
inline EnsembleResult ensemble_predict(std::vector<EnsembleMember> members, const Volume& image,
                                       const Index3& patch_size, double threshold = 0.5) {
  if (members.empty()) throw config_error("ensemble needs at least one member");
  std::sort(members.begin(), members.end(),
            [](const EnsembleMember& a, const EnsembleMember& b) { return a.path < b.path; });
  const SlidingWindowPlan plan = plan_windows(image.dims, patch_size);
  std::vector<double> sum(image.data.size(), 0.0);
  for (const auto& m : members) {
    const Volume p = predict_volume(m.params, m.net, image, plan);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += p.data[i];
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (double& v : sum) v *= inv;
  Volume probs(image.dims, image.spacing, std::move(sum));
  LabelMask mask = threshold_mask(probs, threshold);
  return EnsembleResult{std::move(probs), std::move(mask)};
}

}  // namespace imbseg
