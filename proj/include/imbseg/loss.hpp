#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "imbseg/errors.hpp"
#include "imbseg/volume.hpp"

namespace imbseg {

// Foreground probabilities for one patch/volume (binary sigmoid formulation,
// single channel).
struct Prediction {
  Volume probs;
  std::optional<Volume> logits;
};

inline Prediction prediction_from_logits(Volume logits) {
  std::vector<double> p(logits.data.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = 1.0 / (1.0 + std::exp(-logits.data[i]));
  Volume probs(logits.dims, logits.spacing, std::move(p));
  return Prediction{std::move(probs), std::move(logits)};
}

// Scalar loss plus dL/dp per voxel.
struct LossValue {
  double value = 0.0;
  std::vector<double> grad;
};

enum class LossKind { dice, ce, topk, dice_ce, dice_topk };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::dice: return "dice";
    case LossKind::ce: return "ce";
    case LossKind::topk: return "topk";
    case LossKind::dice_ce: return "dice_ce";
    case LossKind::dice_topk: return "dice_topk";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "dice") return LossKind::dice;
  if (s == "ce") return LossKind::ce;
  if (s == "topk") return LossKind::topk;
  if (s == "dice_ce") return LossKind::dice_ce;
  if (s == "dice_topk") return LossKind::dice_topk;
  throw config_error("unknown loss kind: " + s);
}

struct LossSpec {
  LossKind kind = LossKind::dice_ce;
  double topk_fraction = 0.10;  // k, fraction of hardest voxels kept
  double dice_epsilon = 1e-5;
  double w_dice = 1.0;
  double w_other = 1.0;
};

inline void validate(const LossSpec& spec) {
  if (!(spec.topk_fraction > 0.0) || spec.topk_fraction > 1.0) throw config_error("topk fraction must be in (0, 1]");
  if (!(spec.dice_epsilon > 0.0)) throw config_error("dice epsilon must be > 0");
  if (spec.w_dice < 0.0 || spec.w_other < 0.0 || (spec.w_dice == 0.0 && spec.w_other == 0.0))
    throw config_error("compound weights must be >= 0 and not both 0");
}

// Span-level cores. The trainer evaluates a whole batch as one flat grid
// (batch-Dice), so these take raw spans; the Volume overloads below add the
// geometry checks.
namespace loss_core {

constexpr double kCeClamp = 1e-7;

inline double dice(std::span<const double> p, std::span<const std::uint8_t> g, double eps, std::span<double> grad) {
  double sum_p = 0.0, sum_g = 0.0, sum_pg = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sum_p += p[i];
    sum_g += g[i];
    if (g[i]) sum_pg += p[i];
  }
  const double num = 2.0 * sum_pg + eps;
  const double den = sum_p + sum_g + eps;
  for (std::size_t i = 0; i < p.size(); ++i)
    grad[i] = -(2.0 * static_cast<double>(g[i]) * den - num) / (den * den);
  return 1.0 - num / den;
}

// Per-voxel cross-entropy with probabilities clamped to [delta, 1-delta].
// The gradient is zero wherever clamping was active.
inline double ce_voxel(double p, std::uint8_t g, double& dldp) {
  const double pc = std::clamp(p, kCeClamp, 1.0 - kCeClamp);
  if (p < kCeClamp || p > 1.0 - kCeClamp) {
    dldp = 0.0;
  } else {
    dldp = g ? -1.0 / pc : 1.0 / (1.0 - pc);
  }
  return g ? -std::log(pc) : -std::log(1.0 - pc);
}

inline double ce(std::span<const double> p, std::span<const std::uint8_t> g, std::span<double> grad) {
  const double inv_n = 1.0 / static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double dldp;
    total += ce_voxel(p[i], g[i], dldp);
    grad[i] = dldp * inv_n;
  }
  return total * inv_n;
}

// Mean cross-entropy over the ceil(k*N) hardest voxels. Ties at the cut are
// all included and the mean renormalized by the selected count.
inline double topk(std::span<const double> p, std::span<const std::uint8_t> g, double k, std::span<double> grad) {
  const std::size_t n = p.size();
  std::vector<double> ce_vals(n);
  std::vector<double> dldp(n);
  for (std::size_t i = 0; i < n; ++i) ce_vals[i] = ce_voxel(p[i], g[i], dldp[i]);

  const std::size_t m = static_cast<std::size_t>(std::ceil(k * static_cast<double>(n)));
  std::vector<double> sorted(ce_vals);
  std::nth_element(sorted.begin(), sorted.begin() + (m - 1), sorted.end(), std::greater<double>());
  const double cut = sorted[m - 1];

  std::size_t selected = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (ce_vals[i] >= cut) {
      ++selected;
      total += ce_vals[i];
    }
  const double inv_s = 1.0 / static_cast<double>(selected);
  for (std::size_t i = 0; i < n; ++i) grad[i] = (ce_vals[i] >= cut) ? dldp[i] * inv_s : 0.0;
  return total * inv_s;
}

inline LossValue evaluate(const LossSpec& spec, std::span<const double> p, std::span<const std::uint8_t> g) {
  validate(spec);
  if (p.size() != g.size() || p.empty()) throw config_error("loss: prediction/target shape mismatch");
  LossValue out;
  out.grad.assign(p.size(), 0.0);
  switch (spec.kind) {
    case LossKind::dice:
      out.value = dice(p, g, spec.dice_epsilon, out.grad);
      return out;
    case LossKind::ce:
      out.value = ce(p, g, out.grad);
      return out;
    case LossKind::topk:
      out.value = topk(p, g, spec.topk_fraction, out.grad);
      return out;
    case LossKind::dice_ce:
    case LossKind::dice_topk: {
      std::vector<double> other_grad(p.size());
      const double d = dice(p, g, spec.dice_epsilon, out.grad);
      const double o = (spec.kind == LossKind::dice_ce) ? ce(p, g, other_grad)
                                                        : topk(p, g, spec.topk_fraction, other_grad);
      out.value = spec.w_dice * d + spec.w_other * o;
      for (std::size_t i = 0; i < p.size(); ++i)
        out.grad[i] = spec.w_dice * out.grad[i] + spec.w_other * other_grad[i];
      return out;
    }
  }
  throw config_error("unknown loss kind");
}

}  // namespace loss_core

namespace detail {

inline void check_loss_inputs(const Prediction& pred, const LabelMask& target) {
  if (pred.probs.dims != target.dims) throw config_error("loss: prediction/target shape mismatch");
}

}  // namespace detail

// Soft Dice: L = 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps).
inline LossValue dice_loss(const Prediction& pred, const LabelMask& target, double eps = 1e-5) {
  detail::check_loss_inputs(pred, target);
  LossSpec spec{LossKind::dice, 0.10, eps, 1.0, 1.0};
  return loss_core::evaluate(spec, pred.probs.data, target.data);
}

inline LossValue ce_loss(const Prediction& pred, const LabelMask& target) {
  detail::check_loss_inputs(pred, target);
  return loss_core::evaluate(LossSpec{LossKind::ce}, pred.probs.data, target.data);
}

inline LossValue topk_loss(const Prediction& pred, const LabelMask& target, double k) {
  detail::check_loss_inputs(pred, target);
  LossSpec spec{LossKind::topk, k};
  return loss_core::evaluate(spec, pred.probs.data, target.data);
}

inline LossValue compound_loss(const LossSpec& spec, const Prediction& pred, const LabelMask& target) {
  detail::check_loss_inputs(pred, target);
  return loss_core::evaluate(spec, pred.probs.data, target.data);
}

}  // namespace imbseg
