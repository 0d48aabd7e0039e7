#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "imbseg/errors.hpp"
#include "imbseg/inference.hpp"
#include "imbseg/loss.hpp"
#include "imbseg/metrics.hpp"
#include "imbseg/net.hpp"
#include "imbseg/rng.hpp"
#include "imbseg/volume.hpp"
#include "json.hpp"

namespace imbseg {

struct TrainConfig {
  LossSpec loss;
  Index3 patch_size{32, 32, 32};
  int batch_size = 2;
  int iterations = 600;
  double lr0 = 0.01;
  double poly_power = 0.9;
  double momentum = 0.99;  // nesterov
  double oversample_fraction = 1.0 / 3.0;
  double grad_clip_norm = 12.0;
  int eval_interval = 0;  // 0: validate only after the final iteration
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& tc) {
  validate(tc.loss);
  for (int a = 0; a < 3; ++a)
    if (tc.patch_size[a] < 1) throw config_error("train: patch_size must be >= 1");
  if (tc.batch_size < 1) throw config_error("train: batch_size must be >= 1");
  if (tc.iterations < 0) throw config_error("train: iterations must be >= 0");
  if (!(tc.lr0 > 0.0)) throw config_error("train: lr0 must be > 0");
  if (tc.poly_power < 0.0) throw config_error("train: poly_power must be >= 0");
  if (tc.momentum < 0.0 || tc.momentum >= 1.0) throw config_error("train: momentum must be in [0,1)");
  if (tc.oversample_fraction < 0.0 || tc.oversample_fraction > 1.0)
    throw config_error("train: oversample_fraction must be in [0,1]");
  if (tc.grad_clip_norm < 0.0) throw config_error("train: grad_clip_norm must be >= 0");
  if (tc.eval_interval < 0) throw config_error("train: eval_interval must be >= 0");
}

inline void to_json(nlohmann::json& j, const LossSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)},
                     {"topk_fraction", s.topk_fraction},
                     {"dice_epsilon", s.dice_epsilon},
                     {"w_dice", s.w_dice},
                     {"w_other", s.w_other}};
}

inline void from_json(const nlohmann::json& j, LossSpec& s) {
  if (j.contains("kind")) s.kind = loss_kind_from_string(j.at("kind").get<std::string>());
  s.topk_fraction = j.value("topk_fraction", s.topk_fraction);
  s.dice_epsilon = j.value("dice_epsilon", s.dice_epsilon);
  s.w_dice = j.value("w_dice", s.w_dice);
  s.w_other = j.value("w_other", s.w_other);
}

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = nlohmann::json{{"loss", t.loss},
                     {"patch_size", t.patch_size},
                     {"batch_size", t.batch_size},
                     {"iterations", t.iterations},
                     {"lr0", t.lr0},
                     {"poly_power", t.poly_power},
                     {"momentum", t.momentum},
                     {"oversample_fraction", t.oversample_fraction},
                     {"grad_clip_norm", t.grad_clip_norm},
                     {"eval_interval", t.eval_interval},
                     {"seed", t.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  if (j.contains("loss")) j.at("loss").get_to(t.loss);
  if (j.contains("patch_size")) j.at("patch_size").get_to(t.patch_size);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.iterations = j.value("iterations", t.iterations);
  t.lr0 = j.value("lr0", t.lr0);
  t.poly_power = j.value("poly_power", t.poly_power);
  t.momentum = j.value("momentum", t.momentum);
  t.oversample_fraction = j.value("oversample_fraction", t.oversample_fraction);
  t.grad_clip_norm = j.value("grad_clip_norm", t.grad_clip_norm);
  t.eval_interval = j.value("eval_interval", t.eval_interval);
  t.seed = j.value("seed", t.seed);
}

struct FoldSplit {
  int fold_index = 0;
  std::vector<std::string> train_case_ids;
  std::vector<std::string> val_case_ids;
};

// Deterministic shuffle by seed, then round-robin assignment to validation
// sets; the n_folds validation sets partition the dataset with sizes
// differing by at most one.
inline std::vector<FoldSplit> make_folds(const std::vector<std::string>& case_ids, int n_folds, std::uint64_t seed) {
  if (n_folds < 1) throw config_error("make_folds: n_folds must be >= 1");
  if (static_cast<int>(case_ids.size()) < n_folds)
    throw config_error("make_folds: need at least " + std::to_string(n_folds) + " cases, got " +
                       std::to_string(case_ids.size()));
  std::vector<std::string> shuffled = case_ids;
  Rng rng(seed);
  rng.shuffle(shuffled);
  std::vector<FoldSplit> folds(n_folds);
  for (int f = 0; f < n_folds; ++f) folds[f].fold_index = f;
  for (std::size_t i = 0; i < shuffled.size(); ++i) {
    const int f = static_cast<int>(i % n_folds);
    for (int g = 0; g < n_folds; ++g) {
      if (g == f)
        folds[g].val_case_ids.push_back(shuffled[i]);
      else
        folds[g].train_case_ids.push_back(shuffled[i]);
    }
  }
  return folds;
}

struct TrainCase {
  std::string id;
  Volume image;
  LabelMask mask;
  std::vector<std::size_t> fg_voxels;  // flat indices of foreground voxels
};

inline TrainCase make_train_case(std::string id, Volume image, LabelMask mask) {
  detail::require_same_geometry(image, mask, ("train case " + id).c_str());
  TrainCase c{std::move(id), std::move(image), std::move(mask), {}};
  for (std::size_t i = 0; i < c.mask.data.size(); ++i)
    if (c.mask.data[i]) c.fg_voxels.push_back(i);
  return c;
}

struct PatchSample {
  Volume image;
  std::vector<std::uint8_t> target;
  std::size_t case_index = 0;
  bool forced_foreground = false;
  bool contains_foreground = false;
};

namespace detail {

// Window [origin, origin + patch) in case coordinates; parts outside the
// volume are zero-padded (origins may be negative for small cases).
inline PatchSample extract_patch(const TrainCase& c, const Index3& patch, const Index3& origin) {
  PatchSample s;
  s.image = Volume(patch, c.image.spacing, std::vector<double>(voxel_count(patch), 0.0));
  s.target.assign(voxel_count(patch), 0);
  const int x_lo = std::max(0, -origin[0]), x_hi = std::min(patch[0], c.image.dims[0] - origin[0]);
  const int y_lo = std::max(0, -origin[1]), y_hi = std::min(patch[1], c.image.dims[1] - origin[1]);
  const int z_lo = std::max(0, -origin[2]), z_hi = std::min(patch[2], c.image.dims[2] - origin[2]);
  for (int z = z_lo; z < z_hi; ++z)
    for (int y = y_lo; y < y_hi; ++y) {
      const std::size_t src = voxel_index(c.image.dims, origin[0] + x_lo, origin[1] + y, origin[2] + z);
      const std::size_t dst = voxel_index(patch, x_lo, y, z);
      const int n = x_hi - x_lo;
      if (n <= 0) continue;
      std::copy_n(c.image.data.begin() + src, n, s.image.data.begin() + dst);
      std::copy_n(c.mask.data.begin() + src, n, s.target.begin() + dst);
    }
  for (std::uint8_t v : s.target)
    if (v) {
      s.contains_foreground = true;
      break;
    }
  return s;
}

inline int clamp_origin(int want, int dim, int patch) {
  const int lo = std::min(0, dim - patch);
  const int hi = std::max(0, dim - patch);
  return std::clamp(want, lo, hi);
}

}  // namespace detail

// One training batch. Items with index >= round(batch_size * (1 - fraction))
// are forced to contain a foreground voxel when any training case has one;
// the rest are uniform random windows.
inline std::vector<PatchSample> sample_batch(const std::vector<const TrainCase*>& cases, const TrainConfig& tc,
                                             Rng& rng) {
  if (cases.empty()) throw config_error("sample_batch: empty training set");
  std::vector<std::size_t> fg_pool;
  for (std::size_t i = 0; i < cases.size(); ++i)
    if (!cases[i]->fg_voxels.empty()) fg_pool.push_back(i);

  const int first_forced =
      static_cast<int>(std::llround(static_cast<double>(tc.batch_size) * (1.0 - tc.oversample_fraction)));
  std::vector<PatchSample> batch;
  batch.reserve(tc.batch_size);
  for (int j = 0; j < tc.batch_size; ++j) {
    const bool force_fg = j >= first_forced && !fg_pool.empty();
    const std::size_t ci =
        force_fg ? fg_pool[rng.uniform_int(0, fg_pool.size() - 1)] : rng.uniform_int(0, cases.size() - 1);
    const TrainCase& c = *cases[ci];
    Index3 origin{};
    if (force_fg) {
      const std::size_t v = c.fg_voxels[rng.uniform_int(0, c.fg_voxels.size() - 1)];
      const auto [vx, vy, vz] = voxel_coords(c.image.dims, v);
      const Index3 want{vx - tc.patch_size[0] / 2, vy - tc.patch_size[1] / 2, vz - tc.patch_size[2] / 2};
      for (int a = 0; a < 3; ++a) origin[a] = detail::clamp_origin(want[a], c.image.dims[a], tc.patch_size[a]);
    } else {
      for (int a = 0; a < 3; ++a) {
        const int span = c.image.dims[a] - tc.patch_size[a];
        origin[a] = span > 0 ? static_cast<int>(rng.uniform_int(0, span)) : detail::clamp_origin(span / 2, c.image.dims[a], tc.patch_size[a]);
      }
    }
    PatchSample s = detail::extract_patch(c, tc.patch_size, origin);
    s.case_index = ci;
    s.forced_foreground = force_fg;
    batch.push_back(std::move(s));
  }
  return batch;
}

inline double poly_lr(double lr0, long iteration, long total, double power) {
  return lr0 * std::pow(1.0 - static_cast<double>(iteration) / static_cast<double>(total), power);
}

// Rescales the gradient to L2 norm max_norm when it exceeds it; returns the
// pre-clip norm. max_norm 0 disables clipping.
inline double clip_grad_norm(std::vector<double>& grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (double& g : grad) g *= scale;
  }
  return norm;
}

struct SgdState {
  std::vector<double> velocity;
};

// Nesterov momentum in the convention v = mu*v + g; step = g + mu*v.
inline void sgd_nesterov_update(std::vector<double>& params, const std::vector<double>& grad, SgdState& st,
                                double lr, double mu) {
  if (st.velocity.size() != params.size()) st.velocity.assign(params.size(), 0.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.velocity[i] = mu * st.velocity[i] + grad[i];
    params[i] -= lr * (grad[i] + mu * st.velocity[i]);
  }
}

struct TrainLogRow {
  long iteration = 0;  // 1-based
  double loss = 0.0;
  double lr = 0.0;
  double val_dsc = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
};

struct TrainResult {
  ModelParams final_params;
  ModelParams best_params;  // best validation DSC (final when never evaluated)
  double best_val_dsc = std::numeric_limits<double>::quiet_NaN();
  long best_iteration = -1;
  std::vector<TrainLogRow> log;
};

namespace detail {

inline std::vector<const TrainCase*> resolve_cases(const std::vector<TrainCase>& dataset,
                                                   const std::vector<std::string>& ids) {
  std::map<std::string, const TrainCase*> by_id;
  for (const auto& c : dataset) by_id[c.id] = &c;
  std::vector<const TrainCase*> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw missing_artifact("fold references unknown case id: " + id);
    out.push_back(it->second);
  }
  return out;
}

}  // namespace detail

// Mean DSC of thresholded sliding-window predictions over the fold's
// validation cases.
inline double validate_fold(const ModelParams& params, const NetConfig& net, const FoldSplit& fold,
                            const std::vector<TrainCase>& dataset, const Index3& patch_size) {
  const auto cases = detail::resolve_cases(dataset, fold.val_case_ids);
  if (cases.empty()) throw config_error("validate_fold: empty validation set");
  double sum = 0.0;
  for (const TrainCase* c : cases) {
    const SlidingWindowPlan plan = plan_windows(c->image.dims, patch_size);
    const Volume probs = predict_volume(params, net, c->image, plan);
    sum += dsc(threshold_mask(probs), c->mask);
  }
  return sum / static_cast<double>(cases.size());
}

// SGD over the fold's training cases: poly learning-rate decay, nesterov
// momentum, foreground oversampling, batch-joint loss over the concatenated
// patch probabilities. Deterministic for a fixed seed.
inline TrainResult train_fold(const std::vector<TrainCase>& dataset, const FoldSplit& fold, const NetConfig& net,
                              const TrainConfig& tc) {
  validate(net);
  validate(tc);
  detail::check_patch_dims(net, tc.patch_size);
  const auto train_cases = detail::resolve_cases(dataset, fold.train_case_ids);
  if (train_cases.empty()) throw config_error("train_fold: empty training set");

  TrainResult res;
  ModelParams params = init_params(net, derive_seed(tc.seed, 2 * static_cast<std::uint64_t>(fold.fold_index)));
  Rng rng(derive_seed(tc.seed, 2 * static_cast<std::uint64_t>(fold.fold_index) + 1));
  SgdState opt;
  const std::size_t patch_n = voxel_count(tc.patch_size);

  for (int t = 0; t < tc.iterations; ++t) {
    const double lr = poly_lr(tc.lr0, t, tc.iterations, tc.poly_power);
    const auto batch = sample_batch(train_cases, tc, rng);

    std::vector<ForwardTrace> traces;
    traces.reserve(batch.size());
    std::vector<double> probs_all(batch.size() * patch_n);
    std::vector<std::uint8_t> targets_all(batch.size() * patch_n);
    for (std::size_t j = 0; j < batch.size(); ++j) {
      traces.push_back(forward_trace(params, net, detail::tensor_from_volume(batch[j].image)));
      const auto& logits = traces.back().logits().v;
      for (std::size_t i = 0; i < patch_n; ++i)
        probs_all[j * patch_n + i] = 1.0 / (1.0 + std::exp(-logits[i]));
      std::copy(batch[j].target.begin(), batch[j].target.end(), targets_all.begin() + j * patch_n);
    }

    const LossValue lv = loss_core::evaluate(tc.loss, probs_all, targets_all);
    if (!std::isfinite(lv.value))
      throw numeric_error("training diverged: non-finite loss at iteration " + std::to_string(t + 1));

    std::vector<double> grad(params.values.size(), 0.0);
    std::vector<double> dlogits(patch_n);
    for (std::size_t j = 0; j < batch.size(); ++j) {
      for (std::size_t i = 0; i < patch_n; ++i) {
        const double p = probs_all[j * patch_n + i];
        dlogits[i] = lv.grad[j * patch_n + i] * p * (1.0 - p);
      }
      const std::vector<double> g = backward_from_trace(params, net, traces[j], dlogits);
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
    }
    clip_grad_norm(grad, tc.grad_clip_norm);
    sgd_nesterov_update(params.values, grad, opt, lr, tc.momentum);
    for (double v : params.values)
      if (!std::isfinite(v))
        throw numeric_error("training diverged: non-finite parameter at iteration " + std::to_string(t + 1));

    TrainLogRow row{t + 1, lv.value, lr, std::numeric_limits<double>::quiet_NaN()};
    const bool last = t + 1 == tc.iterations;
    if (last || (tc.eval_interval > 0 && (t + 1) % tc.eval_interval == 0)) {
      row.val_dsc = validate_fold(params, net, fold, dataset, tc.patch_size);
      if (!(row.val_dsc <= res.best_val_dsc)) {  // NaN-aware: first eval always wins
        res.best_val_dsc = row.val_dsc;
        res.best_iteration = t + 1;
        res.best_params = params;
      }
    }
    res.log.push_back(row);
  }

  res.final_params = std::move(params);
  if (res.best_iteration < 0) res.best_params = res.final_params;
  return res;
}

// Per fold, the loss group with the highest validation DSC; ties go to the
// first-listed group.
inline std::vector<LossKind> select_best_per_fold(const std::vector<LossKind>& groups,
                                                  const std::vector<std::vector<double>>& dsc_by_fold) {
  if (groups.empty()) throw config_error("select_best_per_fold: no loss groups");
  std::vector<LossKind> out;
  out.reserve(dsc_by_fold.size());
  for (std::size_t f = 0; f < dsc_by_fold.size(); ++f) {
    if (dsc_by_fold[f].size() != groups.size())
      throw config_error("select_best_per_fold: incomplete results table at fold " + std::to_string(f));
    std::size_t best = 0;
    for (std::size_t g = 1; g < groups.size(); ++g)
      if (dsc_by_fold[f][g] > dsc_by_fold[f][best]) best = g;
    out.push_back(groups[best]);
  }
  return out;
}

}  // namespace imbseg
