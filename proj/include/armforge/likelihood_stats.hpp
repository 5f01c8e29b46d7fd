#pragma once

// Class-likelihoods from raw scores, and scalar confidence indicators of the
// likelihood rows (variance, std, log-variance, entropy) rescaled to [-1, 1].

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "armforge/field.hpp"

namespace armforge {

/// Raw per-pixel class scores. channels == class count.
struct ScoreMap {
  Grid<double> values;

  ScoreMap() = default;
  explicit ScoreMap(Grid<double> g) : values(std::move(g)) {}
  ScoreMap(int h, int w, int classes) : values(h, w, classes) {}

  int classes() const { return values.channels; }
  std::size_t pixels() const { return values.pixels(); }
};

/// Per-pixel class-likelihoods; every row lies on the probability simplex.
struct LikelihoodMap {
  Grid<double> values;

  int classes() const { return values.channels; }
  std::size_t pixels() const { return values.pixels(); }
};

enum class IndicatorKind { kVariance, kStd, kLogVariance, kEntropy };

inline std::string_view to_string(IndicatorKind k) {
  switch (k) {
    case IndicatorKind::kVariance: return "var";
    case IndicatorKind::kStd: return "std";
    case IndicatorKind::kLogVariance: return "log_var";
    case IndicatorKind::kEntropy: return "entropy";
  }
  return "?";
}

inline IndicatorKind parse_indicator(std::string_view s) {
  if (s == "var") return IndicatorKind::kVariance;
  if (s == "std") return IndicatorKind::kStd;
  if (s == "log_var") return IndicatorKind::kLogVariance;
  if (s == "entropy") return IndicatorKind::kEntropy;
  throw std::invalid_argument("unknown indicator '" + std::string(s) + "' (expected var|std|log_var|entropy)");
}

/// Per-pixel scalar confidence. Normalized maps are oriented so that +1 is the
/// most confident (one-hot) prediction and -1 the uniform one.
struct ConfidenceMap {
  int height = 0;
  int width = 0;
  int classes = 0;
  IndicatorKind kind = IndicatorKind::kVariance;
  bool normalized = false;
  std::vector<double> values;

  std::size_t pixels() const { return values.size(); }
};

/// Guard added inside logarithms of the log-variance and entropy indicators.
inline constexpr double kLogEps = 1e-12;

/// How the squared deviations of a likelihood row are reduced. kMean keeps the
/// range [0, (C-1)/C^2]; kSum is the bare sum of squares, C times larger.
enum class VarianceScaling { kMean, kSum };

inline LikelihoodMap softmax(const ScoreMap& scores) {
  const int c = scores.classes();
  if (c < 2) throw std::invalid_argument("softmax: need at least 2 classes, got " + std::to_string(c));
  LikelihoodMap out{Grid<double>(scores.values.height, scores.values.width, c)};
  for (std::size_t i = 0; i < scores.pixels(); ++i) {
    auto z = scores.values.row(i);
    auto p = out.values.row(i);
    double zmax = z[0];
    for (double v : z) {
      if (!std::isfinite(v))
        throw std::invalid_argument("softmax: non-finite score at pixel " + std::to_string(i));
      zmax = std::max(zmax, v);
    }
    double sum = 0.0;
    for (int k = 0; k < c; ++k) {
      p[k] = std::exp(z[k] - zmax);
      sum += p[k];
    }
    for (int k = 0; k < c; ++k) p[k] /= sum;
  }
  return out;
}

/// Pulls a gradient w.r.t. likelihoods back to the scores of the same pixel.
inline void softmax_backward(std::span<const double> p, std::span<const double> dp, std::span<double> dz) {
  double dot = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) dot += p[k] * dp[k];
  for (std::size_t k = 0; k < p.size(); ++k) dz[k] = p[k] * (dp[k] - dot);
}

inline double max_variance(int classes) { return static_cast<double>(classes - 1) / (static_cast<double>(classes) * classes); }

inline double row_variance(std::span<const double> p, VarianceScaling scaling = VarianceScaling::kMean) {
  const double c = static_cast<double>(p.size());
  const double mean = 1.0 / c;
  double ss = 0.0;
  for (double pk : p) ss += (pk - mean) * (pk - mean);
  return scaling == VarianceScaling::kMean ? ss / c : ss;
}

inline double row_entropy(std::span<const double> p, double eps = kLogEps) {
  double h = 0.0;
  for (double pk : p) h -= pk * std::log(pk + eps);
  return h;
}

inline ConfidenceMap variance(const LikelihoodMap& p, VarianceScaling scaling = VarianceScaling::kMean) {
  ConfidenceMap out{p.values.height, p.values.width, p.classes(), IndicatorKind::kVariance, false, {}};
  out.values.resize(p.pixels());
  for (std::size_t i = 0; i < p.pixels(); ++i) out.values[i] = row_variance(p.values.row(i), scaling);
  return out;
}

/// Maps raw variance v in [0, (C-1)/C^2] affinely onto [-1, 1].
inline double normalize_variance_value(double v, int classes) {
  const double vmax = max_variance(classes);
  // Rounding of a one-hot row can overshoot vmax by a few ulps.
  const double tol = 1e-12 * vmax;
  if (!(v >= -tol && v <= vmax + tol))
    throw std::invalid_argument("normalize_variance: value " + std::to_string(v) + " outside [0, " +
                                std::to_string(vmax) + "]");
  const double n = 2.0 * classes * classes / (classes - 1.0) * v - 1.0;
  return std::clamp(n, -1.0, 1.0);
}

inline double denormalize_variance_value(double n, int classes) {
  return (n + 1.0) * (classes - 1.0) / (2.0 * classes * classes);
}

inline ConfidenceMap normalize_variance(const ConfidenceMap& raw, int classes) {
  if (raw.kind != IndicatorKind::kVariance || raw.normalized)
    throw std::invalid_argument("normalize_variance: expects a raw variance map");
  if (classes < 2) throw std::invalid_argument("normalize_variance: classes must be >= 2");
  ConfidenceMap out = raw;
  out.normalized = true;
  out.classes = classes;
  for (double& v : out.values) v = normalize_variance_value(v, classes);
  return out;
}

namespace detail {

inline double rescale(double x, double lo, double hi) { return std::clamp(2.0 * (x - lo) / (hi - lo) - 1.0, -1.0, 1.0); }

inline double std_max(int c) { return std::sqrt(max_variance(c)); }
inline double log_var_lo(double eps) { return std::log(eps); }
inline double log_var_hi(int c, double eps) { return std::log(max_variance(c) + eps); }

}  // namespace detail

/// Normalized indicator of one likelihood row.
inline double indicator_value(std::span<const double> p, IndicatorKind kind, double eps = kLogEps) {
  const int c = static_cast<int>(p.size());
  const double var = row_variance(p);
  switch (kind) {
    case IndicatorKind::kVariance: return normalize_variance_value(std::min(var, max_variance(c)), c);
    case IndicatorKind::kStd: return detail::rescale(std::sqrt(var), 0.0, detail::std_max(c));
    case IndicatorKind::kLogVariance:
      return detail::rescale(std::log(var + eps), detail::log_var_lo(eps), detail::log_var_hi(c, eps));
    case IndicatorKind::kEntropy: return std::clamp(1.0 - 2.0 * row_entropy(p, eps) / std::log(c), -1.0, 1.0);
  }
  return 0.0;
}

/// d indicator_value / d p, written into `grad` (size C).
inline void indicator_gradient(std::span<const double> p, IndicatorKind kind, std::span<double> grad,
                               double eps = kLogEps) {
  const int c = static_cast<int>(p.size());
  const double var = row_variance(p);
  const double mean = 1.0 / c;
  // d var / d p_k = 2 (p_k - 1/C) / C
  auto dvar = [&](int k) { return 2.0 * (p[k] - mean) / c; };
  switch (kind) {
    case IndicatorKind::kVariance: {
      const double scale = 2.0 * c * c / (c - 1.0);
      for (int k = 0; k < c; ++k) grad[k] = scale * dvar(k);
      return;
    }
    case IndicatorKind::kStd: {
      const double s = std::max(std::sqrt(var), 1e-12);
      const double scale = 2.0 / detail::std_max(c) / (2.0 * s);
      for (int k = 0; k < c; ++k) grad[k] = scale * dvar(k);
      return;
    }
    case IndicatorKind::kLogVariance: {
      const double scale = 2.0 / (detail::log_var_hi(c, eps) - detail::log_var_lo(eps)) / (var + eps);
      for (int k = 0; k < c; ++k) grad[k] = scale * dvar(k);
      return;
    }
    case IndicatorKind::kEntropy: {
      const double scale = -2.0 / std::log(c);
      for (int k = 0; k < c; ++k) grad[k] = -scale * (std::log(p[k] + eps) + p[k] / (p[k] + eps));
      return;
    }
  }
}

/// Normalized confidence map of the requested kind.
inline ConfidenceMap confidence(const LikelihoodMap& p, IndicatorKind kind, double eps = kLogEps) {
  ConfidenceMap out{p.values.height, p.values.width, p.classes(), kind, true, {}};
  out.values.resize(p.pixels());
  for (std::size_t i = 0; i < p.pixels(); ++i) out.values[i] = indicator_value(p.values.row(i), kind, eps);
  return out;
}

// Unscaled indicators, before the affine map to [-1, 1].

inline ConfidenceMap std_indicator_raw(const LikelihoodMap& p) {
  ConfidenceMap out = variance(p);
  out.kind = IndicatorKind::kStd;
  for (double& v : out.values) v = std::sqrt(v);
  return out;
}

inline ConfidenceMap log_var_indicator_raw(const LikelihoodMap& p, double eps = kLogEps) {
  ConfidenceMap out = variance(p);
  out.kind = IndicatorKind::kLogVariance;
  for (double& v : out.values) v = std::log(v + eps);
  return out;
}

inline ConfidenceMap entropy_indicator_raw(const LikelihoodMap& p, double eps = kLogEps) {
  ConfidenceMap out{p.values.height, p.values.width, p.classes(), IndicatorKind::kEntropy, false, {}};
  out.values.resize(p.pixels());
  for (std::size_t i = 0; i < p.pixels(); ++i) out.values[i] = row_entropy(p.values.row(i), eps);
  return out;
}

inline ConfidenceMap std_indicator(const LikelihoodMap& p) { return confidence(p, IndicatorKind::kStd); }
inline ConfidenceMap log_var_indicator(const LikelihoodMap& p, double eps = kLogEps) {
  return confidence(p, IndicatorKind::kLogVariance, eps);
}
// The entropy input has been reported to make the learnable reweighter diverge;
// eps keeps it finite here but does not cure that instability.
inline ConfidenceMap entropy_indicator(const LikelihoodMap& p, double eps = kLogEps) {
  return confidence(p, IndicatorKind::kEntropy, eps);
}

}  // namespace armforge
