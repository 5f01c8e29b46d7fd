#pragma once

// Adversarial reweighting: a 53-parameter scalar network mapping normalized
// confidence to a sample weight, its fixed linear counterpart, the two-stage
// weight-map normalization, the sign-flipped (ascent) update, and the
// closed-form maximizer that the ascent converges to.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "armforge/likelihood_stats.hpp"
#include "armforge/losses.hpp"

namespace armforge {

enum class NormState { kRaw, kLpNormalized, kFinal };

/// Per-pixel sample weights aligned with a LossMap.
struct WeightMap {
  std::vector<double> w;
  std::vector<std::uint8_t> valid;
  NormState state = NormState::kRaw;

  std::size_t pixels() const { return w.size(); }
};

/// Exponent of the ||W||_p = 1 constraint used by the first normalization stage.
struct NormConstraint {
  double p = 2.0;

  static constexpr NormConstraint l1() { return {1.0}; }
  static constexpr NormConstraint l2() { return {2.0}; }
  static constexpr NormConstraint l3() { return {3.0}; }
};

inline double lp_norm(std::span<const double> w, double p, std::span<const std::uint8_t> valid = {}) {
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!valid.empty() && !valid[i]) continue;
    acc += std::pow(std::abs(w[i]), p);
  }
  return std::pow(acc, 1.0 / p);
}

// ---------------------------------------------------------------------------
// Learnable reweighter: 1 -> 4 -> 4 -> 4 -> 1, Swish between layers, Sigmoid
// on the output.

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double swish(double x) { return x * sigmoid(x); }
inline double swish_grad(double x) {
  const double s = sigmoid(x);
  return s + x * s * (1.0 - s);
}

struct ArmParams {
  static constexpr int kWidth = 4;
  static constexpr std::size_t kCount = (1 * 4 + 4) + (4 * 4 + 4) + (4 * 4 + 4) + (4 * 1 + 1);
  static_assert(kCount == 53);

  // Offsets into the flat array; weight matrices are row-major [out][in].
  static constexpr std::size_t kW1 = 0, kB1 = 4, kW2 = 8, kB2 = 24, kW3 = 28, kB3 = 44, kW4 = 48, kB4 = 52;

  std::array<double, kCount> values{};

  static constexpr std::size_t parameter_count() { return kCount; }

  /// Weights uniform in [-scale, scale], biases zero.
  static ArmParams initialized(std::uint64_t seed, double scale = 0.3) {
    ArmParams p;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    auto fill = [&](std::size_t off, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) p.values[off + i] = u(rng);
    };
    fill(kW1, 4);
    fill(kW2, 16);
    fill(kW3, 16);
    fill(kW4, 4);
    return p;
  }

  bool finite() const { return all_finite(values); }
};

namespace detail {

struct ArmActivations {
  std::array<double, 4> a1, h1, a2, h2, a3, h3;
  double a4 = 0.0;
  double out = 0.0;
};

inline ArmActivations arm_trace(const ArmParams& t, double v) {
  const auto& p = t.values;
  ArmActivations s;
  for (int k = 0; k < 4; ++k) {
    s.a1[k] = p[ArmParams::kW1 + k] * v + p[ArmParams::kB1 + k];
    s.h1[k] = swish(s.a1[k]);
  }
  for (int k = 0; k < 4; ++k) {
    double a = p[ArmParams::kB2 + k];
    for (int j = 0; j < 4; ++j) a += p[ArmParams::kW2 + 4 * k + j] * s.h1[j];
    s.a2[k] = a;
    s.h2[k] = swish(a);
  }
  for (int k = 0; k < 4; ++k) {
    double a = p[ArmParams::kB3 + k];
    for (int j = 0; j < 4; ++j) a += p[ArmParams::kW3 + 4 * k + j] * s.h2[j];
    s.a3[k] = a;
    s.h3[k] = swish(a);
  }
  double a = p[ArmParams::kB4];
  for (int j = 0; j < 4; ++j) a += p[ArmParams::kW4 + j] * s.h3[j];
  s.a4 = a;
  s.out = sigmoid(a);
  return s;
}

inline void check_normalized(const ConfidenceMap& v) {
  if (!v.normalized) throw std::invalid_argument("reweighter: confidence map is not normalized to [-1, 1]");
  for (std::size_t i = 0; i < v.values.size(); ++i)
    if (!(v.values[i] >= -1.0 && v.values[i] <= 1.0))
      throw std::invalid_argument("reweighter: confidence " + std::to_string(v.values[i]) + " at pixel " +
                                  std::to_string(i) + " outside [-1, 1]");
}

inline std::vector<std::uint8_t> mask_or_all(std::span<const std::uint8_t> valid, std::size_t n) {
  if (valid.empty()) return std::vector<std::uint8_t>(n, 1);
  if (valid.size() != n) throw std::invalid_argument("reweighter: mask size mismatch");
  return {valid.begin(), valid.end()};
}

}  // namespace detail

/// W(v; theta) for a single input.
inline double arm_eval(const ArmParams& theta, double v) { return detail::arm_trace(theta, v).out; }

/// Accumulates upstream * dW/dtheta into `grad` and returns upstream * dW/dv.
inline double arm_backward(const ArmParams& theta, double v, double upstream, std::array<double, 53>& grad) {
  const auto& p = theta.values;
  const auto s = detail::arm_trace(theta, v);
  const double d4 = upstream * s.out * (1.0 - s.out);
  grad[ArmParams::kB4] += d4;
  std::array<double, 4> d3{}, d2{}, d1{};
  for (int j = 0; j < 4; ++j) {
    grad[ArmParams::kW4 + j] += d4 * s.h3[j];
    d3[j] = d4 * p[ArmParams::kW4 + j] * swish_grad(s.a3[j]);
  }
  for (int k = 0; k < 4; ++k) {
    grad[ArmParams::kB3 + k] += d3[k];
    for (int j = 0; j < 4; ++j) {
      grad[ArmParams::kW3 + 4 * k + j] += d3[k] * s.h2[j];
      d2[j] += d3[k] * p[ArmParams::kW3 + 4 * k + j];
    }
  }
  for (int j = 0; j < 4; ++j) d2[j] *= swish_grad(s.a2[j]);
  for (int k = 0; k < 4; ++k) {
    grad[ArmParams::kB2 + k] += d2[k];
    for (int j = 0; j < 4; ++j) {
      grad[ArmParams::kW2 + 4 * k + j] += d2[k] * s.h1[j];
      d1[j] += d2[k] * p[ArmParams::kW2 + 4 * k + j];
    }
  }
  double dv = 0.0;
  for (int k = 0; k < 4; ++k) {
    d1[k] *= swish_grad(s.a1[k]);
    grad[ArmParams::kB1 + k] += d1[k];
    grad[ArmParams::kW1 + k] += d1[k] * v;
    dv += d1[k] * p[ArmParams::kW1 + k];
  }
  return dv;
}

/// Raw weight map W(v_i; theta) in (0, 1). Pixels outside `valid` get weight 0.
inline WeightMap arm_forward(const ArmParams& theta, const ConfidenceMap& v, std::span<const std::uint8_t> valid = {}) {
  detail::check_normalized(v);
  WeightMap out{std::vector<double>(v.pixels(), 0.0), detail::mask_or_all(valid, v.pixels()), NormState::kRaw};
  for (std::size_t i = 0; i < v.pixels(); ++i)
    if (out.valid[i]) out.w[i] = arm_eval(theta, v.values[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Fixed linear reweighter W(v) = clamp(k v + b, 0, 1).

struct LinearArmParams {
  double k = -0.5;
  double b = 0.5;

  static constexpr LinearArmParams suppressing() { return {-0.5, 0.5}; }
  static constexpr LinearArmParams focusing() { return {0.5, 0.5}; }

  double eval(double v) const { return std::clamp(k * v + b, 0.0, 1.0); }
  /// dW/dv, zero where the clamp is active.
  double slope(double v) const {
    const double y = k * v + b;
    return (y > 0.0 && y < 1.0) ? k : 0.0;
  }
};

inline WeightMap linear_arm(const LinearArmParams& params, const ConfidenceMap& v,
                            std::span<const std::uint8_t> valid = {}) {
  WeightMap out{std::vector<double>(v.pixels(), 0.0), detail::mask_or_all(valid, v.pixels()), NormState::kRaw};
  for (std::size_t i = 0; i < v.pixels(); ++i)
    if (out.valid[i]) out.w[i] = params.eval(v.values[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Two-stage normalization.
//
// Stage 1 divides by the Lp norm over valid pixels and is part of the
// differentiable graph. Stage 2 divides the result by its L1 norm so the final
// weights sum to 1; that divisor is held constant when differentiating.

struct NormalizedWeights {
  WeightMap raw;
  WeightMap lp;     ///< stage 1: unit Lp norm
  WeightMap final;  ///< stage 2: unit sum
  double p = 2.0;
  double raw_lp_norm = 0.0;  ///< ||raw||_p
  double lp_l1_norm = 0.0;   ///< ||stage 1||_1, the gradient-stopped divisor

  /// Given dQ/dfinal_i, returns dQ/draw_i through stage 1 with the stage-2
  /// divisor treated as a constant.
  std::vector<double> backward_to_raw(std::span<const double> dfinal) const {
    const std::size_t n = raw.pixels();
    std::vector<double> out(n, 0.0);
    const double norm = raw_lp_norm;
    double dot = 0.0;  // sum_i h_i w_i with h = dfinal / ||u||_1
    for (std::size_t i = 0; i < n; ++i)
      if (raw.valid[i]) dot += dfinal[i] / lp_l1_norm * raw.w[i];
    for (std::size_t j = 0; j < n; ++j) {
      if (!raw.valid[j]) continue;
      const double h = dfinal[j] / lp_l1_norm;
      out[j] = h / norm - dot / (norm * norm) * std::pow(raw.w[j] / norm, p - 1.0);
    }
    return out;
  }
};

inline NormalizedWeights normalize_weights(const WeightMap& raw, NormConstraint c) {
  if (!(c.p >= 1.0)) throw std::invalid_argument("normalize_weights: constraint exponent must be >= 1");
  NormalizedWeights out;
  out.raw = raw;
  out.p = c.p;
  for (std::size_t i = 0; i < raw.pixels(); ++i) {
    if (!raw.valid[i]) continue;
    if (!(raw.w[i] >= 0.0) || !std::isfinite(raw.w[i]))
      throw std::invalid_argument("normalize_weights: weight at pixel " + std::to_string(i) +
                                  " is negative or non-finite");
  }
  out.raw_lp_norm = lp_norm(raw.w, c.p, raw.valid);
  if (!(out.raw_lp_norm > 0.0))
    throw std::invalid_argument("normalize_weights: weight map is zero on every valid pixel");
  out.lp = raw;
  out.lp.state = NormState::kLpNormalized;
  for (std::size_t i = 0; i < raw.pixels(); ++i) out.lp.w[i] = raw.valid[i] ? raw.w[i] / out.raw_lp_norm : 0.0;
  out.lp_l1_norm = lp_norm(out.lp.w, 1.0, raw.valid);
  out.final = out.lp;
  out.final.state = NormState::kFinal;
  for (double& w : out.final.w) w /= out.lp_l1_norm;
  return out;
}

/// Final weights 1/N over the valid pixels.
inline WeightMap uniform_weights(std::span<const std::uint8_t> valid) {
  const auto n = static_cast<double>(std::count(valid.begin(), valid.end(), 1));
  if (n == 0) throw std::invalid_argument("uniform_weights: no valid pixels");
  WeightMap out{std::vector<double>(valid.size(), 0.0), {valid.begin(), valid.end()}, NormState::kFinal};
  for (std::size_t i = 0; i < valid.size(); ++i)
    if (valid[i]) out.w[i] = 1.0 / n;
  return out;
}

/// Weighted objective Q = sum_i final_i l_i for the learnable reweighter.
inline double arm_objective(const ArmParams& theta, const ConfidenceMap& v, const LossMap& l, NormConstraint c) {
  const auto nw = normalize_weights(arm_forward(theta, v, l.valid), c);
  return masked_mean(l, nw.final.w);
}

/// dQ/dtheta for Q = sum_i final_i(theta) l_i, differentiating through the
/// network and stage 1 only. The loss map is a constant here.
inline std::array<double, 53> arm_gradient(const ArmParams& theta, const ConfidenceMap& v, const LossMap& l,
                                           NormConstraint c) {
  if (v.pixels() != l.pixels()) throw std::invalid_argument("arm_gradient: confidence/loss size mismatch");
  const auto nw = normalize_weights(arm_forward(theta, v, l.valid), c);
  std::vector<double> dfinal(l.pixels(), 0.0);
  for (std::size_t i = 0; i < l.pixels(); ++i)
    if (l.valid[i]) dfinal[i] = l.loss[i];
  const auto draw = nw.backward_to_raw(dfinal);
  std::array<double, 53> grad{};
  for (std::size_t i = 0; i < l.pixels(); ++i)
    if (l.valid[i] && draw[i] != 0.0) arm_backward(theta, v.values[i], draw[i], grad);
  return grad;
}

// ---------------------------------------------------------------------------
// Momentum SGD shared by descent (positive lr) and ascent (negative lr).

template <std::size_t N>
struct MomentumState {
  std::array<double, N> velocity{};
  double momentum = 0.9;
  long skipped = 0;
};

/// theta <- theta - lr * (momentum * v + grad). A negative lr turns the step
/// into ascent. Non-finite gradients skip the step and bump the counter.
template <std::size_t N>
std::array<double, N> momentum_step(const std::array<double, N>& theta, const std::array<double, N>& grad,
                                    double signed_lr, MomentumState<N>& state) {
  if (!all_finite(grad)) {
    ++state.skipped;
    return theta;
  }
  std::array<double, N> out = theta;
  for (std::size_t i = 0; i < N; ++i) {
    state.velocity[i] = state.momentum * state.velocity[i] + grad[i];
    out[i] -= signed_lr * state.velocity[i];
  }
  return out;
}

using ArmOptimizer = MomentumState<ArmParams::kCount>;

/// Gradient ascent on Q: the descent step with the learning rate negated.
inline ArmParams adversarial_update(const ArmParams& theta, const std::array<double, 53>& grad, double lr,
                                    ArmOptimizer& opt) {
  if (!(lr > 0.0)) throw std::invalid_argument("adversarial_update: lr must be positive");
  ArmParams out;
  out.values = momentum_step(theta.values, grad, -lr, opt);
  return out;
}

// ---------------------------------------------------------------------------
// Maximizers of sum_i w_i l_i under ||w||_p = 1.

/// ||L||_q^{-1/(p-1)} L^{1/(p-1)} with 1/p + 1/q = 1.
inline std::vector<double> holder_closed_form(std::span<const double> loss_profile, double p) {
  if (!(p > 1.0)) throw std::invalid_argument("holder_closed_form: p must be > 1 (p = 1 has no smooth maximizer)");
  double total = 0.0;
  for (double l : loss_profile) {
    if (!(l >= 0.0)) throw std::invalid_argument("holder_closed_form: loss profile must be nonnegative");
    total += l;
  }
  if (total == 0.0) throw std::invalid_argument("holder_closed_form: loss profile is all zero");
  const double q = p / (p - 1.0);
  const double lq = lp_norm(loss_profile, q);
  const double scale = std::pow(lq, -1.0 / (p - 1.0));
  std::vector<double> out(loss_profile.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * std::pow(loss_profile[i], 1.0 / (p - 1.0));
  return out;
}

/// Projected gradient ascent for argmax sum_i w_i l_i s.t. ||w||_p = 1, w >= 0.
/// The gradient is projected on the tangent space of the constraint surface,
/// clipped at zero, and the iterate is rescaled back onto the sphere.
inline std::vector<double> lp_toy_maximizer(std::span<const double> losses, double p, int iterations = 20000,
                                            double step = 0.02) {
  if (!(p >= 1.0)) throw std::invalid_argument("lp_toy_maximizer: p must be >= 1");
  const std::size_t n = losses.size();
  std::vector<double> w(n, std::pow(static_cast<double>(n), -1.0 / p));
  std::vector<double> normal(n);
  for (int it = 0; it < iterations; ++it) {
    double ln = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      normal[i] = std::pow(w[i], p - 1.0);
      ln += losses[i] * normal[i];
      nn += normal[i] * normal[i];
    }
    const double lambda = nn > 0.0 ? ln / nn : 0.0;
    for (std::size_t i = 0; i < n; ++i) w[i] = std::max(0.0, w[i] + step * (losses[i] - lambda * normal[i]));
    const double norm = lp_norm(w, p);
    for (double& x : w) x /= norm;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Checkpoints.

inline constexpr char kArmMagic[4] = {'A', 'R', 'M', 'P'};
inline constexpr std::uint32_t kArmFormatVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: unexpected end of stream");
  return value;
}

}  // namespace detail

/// Binary layout: "ARMP", u32 version, u32 count (53), count x f64, all little-endian.
inline void write_arm_binary(std::ostream& os, const ArmParams& p) {
  os.write(kArmMagic, 4);
  detail::write_le<std::uint32_t>(os, kArmFormatVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ArmParams::kCount));
  for (double v : p.values) detail::write_le(os, v);
}

inline ArmParams read_arm_binary(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kArmMagic, 4) != 0) throw std::runtime_error("arm checkpoint: bad magic");
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kArmFormatVersion)
    throw std::runtime_error("arm checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail::read_le<std::uint32_t>(is);
  if (count != ArmParams::kCount) throw std::runtime_error("arm checkpoint: expected 53 parameters");
  ArmParams p;
  for (double& v : p.values) v = detail::read_le<double>(is);
  return p;
}

inline void write_arm_text(std::ostream& os, const ArmParams& p) {
  struct Layer {
    const char* name;
    std::size_t w, b;
    int out, in;
  };
  constexpr Layer layers[] = {{"layer1", ArmParams::kW1, ArmParams::kB1, 4, 1},
                              {"layer2", ArmParams::kW2, ArmParams::kB2, 4, 4},
                              {"layer3", ArmParams::kW3, ArmParams::kB3, 4, 4},
                              {"layer4", ArmParams::kW4, ArmParams::kB4, 1, 4}};
  os << std::setprecision(17);
  for (const auto& l : layers) {
    os << l.name << " " << l.out << "x" << l.in << "\n";
    for (int o = 0; o < l.out; ++o) {
      os << "  w";
      for (int i = 0; i < l.in; ++i) os << " " << p.values[l.w + static_cast<std::size_t>(o * l.in + i)];
      os << "  b " << p.values[l.b + static_cast<std::size_t>(o)] << "\n";
    }
  }
}

}  // namespace armforge
