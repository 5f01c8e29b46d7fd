#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "armforge/field.hpp"
#include "armforge/likelihood_stats.hpp"

namespace armforge {

/// Floor applied to likelihoods before taking logarithms.
inline constexpr double kProbFloor = 1e-12;

/// Per-pixel loss values; `valid` is 0 at IGNORE pixels, where loss is 0.
struct LossMap {
  std::vector<double> loss;
  std::vector<std::uint8_t> valid;

  std::size_t pixels() const { return loss.size(); }
  std::size_t valid_count() const { return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), 1)); }
};

/// Predicted uncertainty s of the KL loss, stored as log s so s > 0 always.
struct UncertaintyMap {
  std::vector<double> log_s;

  double s(std::size_t i) const { return std::exp(log_s[i]); }
};

enum class LossKind { kCrossEntropy, kGce, kKl };

struct LossSpec {
  LossKind kind = LossKind::kCrossEntropy;
  double gce_q = 0.1;
};

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::kCrossEntropy: return "ce";
    case LossKind::kGce: return "gce";
    case LossKind::kKl: return "kl";
  }
  return "?";
}

inline LossKind parse_loss(std::string_view s) {
  if (s == "ce") return LossKind::kCrossEntropy;
  if (s == "gce") return LossKind::kGce;
  if (s == "kl") return LossKind::kKl;
  throw std::invalid_argument("unknown loss '" + std::string(s) + "' (expected ce|gce|kl)");
}

inline void check_gce_q(double q) {
  if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("gce: q must lie in (0, 1], got " + std::to_string(q));
}

inline double ce_value(double p_gt) { return -std::log(std::max(p_gt, kProbFloor)); }

inline double gce_value(double p_gt, double q) { return (1.0 - std::pow(p_gt, q)) / q; }

/// (1/s) CE + (1/2) log s
inline double kl_value(double ce, double s) { return ce / s + 0.5 * std::log(s); }

/// d kl_value / d s = (s - 2 CE) / (2 s^2)
inline double kl_ds(double ce, double s) { return (s - 2.0 * ce) / (2.0 * s * s); }

/// Minimizer over s > 0 of the KL loss for a pixel with likelihood p_gt in its
/// labelled class: s = -2 ln p_gt.
inline double kl_optimal_s(double p_gt) {
  if (!(p_gt > 0.0 && p_gt < 1.0))
    throw std::invalid_argument("kl_optimal_s: p_gt must lie in (0, 1), got " + std::to_string(p_gt));
  return -2.0 * std::log(p_gt);
}

/// Loss of one pixel. `log_s` is read only for the KL loss.
inline double pixel_loss(const LossSpec& spec, std::span<const double> p, int gt, double log_s = 0.0) {
  const double pg = p[gt];
  switch (spec.kind) {
    case LossKind::kCrossEntropy: return ce_value(pg);
    case LossKind::kGce: return gce_value(pg, spec.gce_q);
    case LossKind::kKl: return kl_value(ce_value(pg), std::exp(log_s));
  }
  return 0.0;
}

/// Gradient of pixel_loss w.r.t. the pixel's raw scores (through softmax),
/// scaled by `scale`. For the KL loss the log s derivative goes to *dlog_s.
inline void pixel_loss_grad(const LossSpec& spec, std::span<const double> p, int gt, double log_s, double scale,
                            std::span<double> dz, double* dlog_s = nullptr) {
  const std::size_t c = p.size();
  double coef = 1.0;
  switch (spec.kind) {
    case LossKind::kCrossEntropy: break;
    case LossKind::kGce: coef = std::pow(p[gt], spec.gce_q); break;
    case LossKind::kKl: {
      const double s = std::exp(log_s);
      coef = 1.0 / s;
      if (dlog_s) *dlog_s = scale * (0.5 - ce_value(p[gt]) / s);
      break;
    }
  }
  // d(-ln p_gt)/dz_k = p_k - [k == gt]; GCE and KL rescale it by p_gt^q and 1/s.
  for (std::size_t k = 0; k < c; ++k) dz[k] = scale * coef * (p[k] - (static_cast<int>(k) == gt ? 1.0 : 0.0));
}

namespace detail {

inline void check_loss_shapes(const LikelihoodMap& p, const LabelMap& gt) {
  if (p.pixels() != gt.pixels() || p.values.width != gt.width)
    throw std::invalid_argument("loss: likelihood map " + std::to_string(p.values.height) + "x" +
                                std::to_string(p.values.width) + " does not match label map " +
                                std::to_string(gt.height) + "x" + std::to_string(gt.width));
  gt.validate(p.classes());
}

template <typename F>
LossMap map_loss(const LikelihoodMap& p, const LabelMap& gt, F&& f) {
  check_loss_shapes(p, gt);
  LossMap out{std::vector<double>(p.pixels(), 0.0), std::vector<std::uint8_t>(p.pixels(), 0)};
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    const int g = gt.labels[i];
    if (g == kIgnore) continue;
    out.valid[i] = 1;
    out.loss[i] = f(i, p.values.row(i), g);
  }
  return out;
}

}  // namespace detail

inline LossMap ce_loss(const LikelihoodMap& p, const LabelMap& gt) {
  return detail::map_loss(p, gt, [](std::size_t, std::span<const double> row, int g) { return ce_value(row[g]); });
}

inline LossMap gce_loss(const LikelihoodMap& p, const LabelMap& gt, double q) {
  check_gce_q(q);
  return detail::map_loss(p, gt,
                          [q](std::size_t, std::span<const double> row, int g) { return gce_value(row[g], q); });
}

inline LossMap kl_loss(const LikelihoodMap& p, const UncertaintyMap& s, const LabelMap& gt) {
  if (s.log_s.size() != p.pixels()) throw std::invalid_argument("kl_loss: uncertainty map size mismatch");
  return detail::map_loss(p, gt, [&](std::size_t i, std::span<const double> row, int g) {
    return kl_value(ce_value(row[g]), s.s(i));
  });
}

inline LossMap compute_loss(const LossSpec& spec, const LikelihoodMap& p, const LabelMap& gt,
                            const UncertaintyMap* s = nullptr) {
  switch (spec.kind) {
    case LossKind::kCrossEntropy: return ce_loss(p, gt);
    case LossKind::kGce: return gce_loss(p, gt, spec.gce_q);
    case LossKind::kKl:
      if (!s) throw std::invalid_argument("compute_loss: KL loss needs an uncertainty map");
      return kl_loss(p, *s, gt);
  }
  return {};
}

/// Sum of w_i l_i over valid pixels. The weights are expected to be normalized
/// already; ignored pixels must carry zero weight.
inline double masked_mean(const LossMap& l, std::span<const double> w) {
  if (w.size() != l.pixels()) throw std::invalid_argument("masked_mean: weight/loss size mismatch");
  if (l.valid_count() == 0) throw std::invalid_argument("masked_mean: no valid pixels");
  double acc = 0.0;
  for (std::size_t i = 0; i < l.pixels(); ++i) {
    if (!l.valid[i]) {
      if (w[i] != 0.0) throw std::invalid_argument("masked_mean: ignored pixel " + std::to_string(i) + " has weight");
      continue;
    }
    acc += w[i] * l.loss[i];
  }
  return acc;
}

/// Uniform weighting 1/N over the valid pixels.
inline double masked_mean(const LossMap& l) {
  const std::size_t n = l.valid_count();
  if (n == 0) throw std::invalid_argument("masked_mean: no valid pixels");
  double acc = 0.0;
  for (std::size_t i = 0; i < l.pixels(); ++i)
    if (l.valid[i]) acc += l.loss[i];
  return acc / static_cast<double>(n);
}

}  // namespace armforge
