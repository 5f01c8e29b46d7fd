#pragma once

// Self-checks behind `armforge verify`: the toy Lp problem, convergence of the
// learnable reweighter to the closed-form maximizer, and central finite
// differences for every analytic gradient.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "armforge/arm.hpp"
#include "armforge/likelihood_stats.hpp"
#include "armforge/losses.hpp"
#include "armforge/toy_model.hpp"
#include "armforge/trainer.hpp"

namespace armforge {

struct CheckLine {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool upper = true;  ///< pass when value < threshold, otherwise value >= threshold
  bool pass() const { return upper ? value < threshold : value >= threshold; }
};

struct VerifyReport {
  std::string suite;
  std::vector<CheckLine> lines;
  bool passed() const {
    return std::all_of(lines.begin(), lines.end(), [](const CheckLine& l) { return l.pass(); });
  }
};

// ---------------------------------------------------------------------------
// Toy Lp problem on three samples.

inline VerifyReport verify_toy_lp() {
  VerifyReport r{"toy_lp", {}};
  const std::vector<double> l = {1.2, 0.6, 0.1};
  const auto w1 = lp_toy_maximizer(l, 1.0);
  r.lines.push_back({"p=1 mass on argmax", w1[0] / (w1[0] + w1[1] + w1[2]), 0.999, false});
  for (double p : {2.0, 3.0}) {
    const auto w = lp_toy_maximizer(l, p);
    const double sw = w[0] + w[1] + w[2];
    std::array<double, 3> ref{};
    double sr = 0.0;
    for (int i = 0; i < 3; ++i) sr += ref[static_cast<std::size_t>(i)] = std::pow(l[static_cast<std::size_t>(i)], 1.0 / (p - 1.0));
    double err = 0.0;
    for (std::size_t i = 0; i < 3; ++i) err = std::max(err, std::abs(w[i] / sw - ref[i] / sr));
    r.lines.push_back({"p=" + std::to_string(static_cast<int>(p)) + " ratio error vs l^(1/(p-1))", err, 1e-3, true});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reweighter against a fixed, strictly decreasing 20-bin loss profile.

inline std::vector<double> decreasing_profile(int bins) {
  std::vector<double> l(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    const double u = 1.0 - (b + 0.5) / bins;
    l[static_cast<std::size_t>(b)] = 0.2 + 1.3 * u * u;
  }
  return l;
}

struct ProfileFit {
  double cosine = 0.0;
  std::vector<double> curve;  ///< W at the bin centres
  ArmParams theta;
};

/// Trains the reweighter alone by adversarial ascent on Q for `steps` steps.
inline ProfileFit fit_profile(const std::vector<double>& profile, double p, int steps, double lr, std::uint64_t seed,
                              bool ascent = true) {
  const int bins = static_cast<int>(profile.size());
  ConfidenceMap v;
  v.height = 1;
  v.width = bins;
  v.classes = 2;
  v.kind = IndicatorKind::kVariance;
  v.normalized = true;
  LossMap l;
  l.loss = profile;
  l.valid.assign(profile.size(), 1);
  for (int b = 0; b < bins; ++b) v.values.push_back(-1.0 + (b + 0.5) * 2.0 / bins);

  ProfileFit out;
  out.theta = ArmParams::initialized(seed);
  ArmOptimizer opt;
  for (int t = 0; t < steps; ++t) {
    const auto g = arm_gradient(out.theta, v, l, NormConstraint{p});
    if (ascent)
      out.theta = adversarial_update(out.theta, g, lr, opt);
    else
      out.theta.values = momentum_step(out.theta.values, g, lr, opt);
  }
  const auto ref = holder_closed_form(profile, p);
  double dot = 0.0, a = 0.0, b = 0.0;
  for (int k = 0; k < bins; ++k) {
    const double w = arm_eval(out.theta, v.values[static_cast<std::size_t>(k)]);
    out.curve.push_back(w);
    dot += w * ref[static_cast<std::size_t>(k)];
    a += w * w;
    b += ref[static_cast<std::size_t>(k)] * ref[static_cast<std::size_t>(k)];
  }
  out.cosine = dot / std::sqrt(a * b);
  return out;
}

inline constexpr double kProfileLr = 0.05;
inline constexpr int kProfileSteps = 5000;

inline VerifyReport verify_holder() {
  VerifyReport r{"holder", {}};
  const auto profile = decreasing_profile(20);
  for (double p : {2.0, 3.0}) {
    const auto fit = fit_profile(profile, p, kProfileSteps, kProfileLr, 7);
    r.lines.push_back({"p=" + std::to_string(static_cast<int>(p)) + " cosine(ARM, closed form)", fit.cosine, 0.99, false});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Finite differences.

inline constexpr double kFdStep = 1e-4;
inline constexpr double kRelFloor = 1e-6;

/// max_i |a_i - f_i| / max(|a_i|, |f_i|, floor)
inline double max_rel_error(std::span<const double> analytic, std::span<const double> numeric,
                            double floor = kRelFloor) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double den = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / den);
  }
  return worst;
}

/// Five-point central differences of f over the entries of x (restored
/// afterwards). Truncation error is O(h^4).
inline std::vector<double> central_diff(std::span<double> x, const std::function<double()>& f, double h = kFdStep) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    auto at = [&](double d) {
      x[i] = keep + d;
      return f();
    };
    const double f2 = at(2 * h), f1 = at(h), m1 = at(-h), m2 = at(-2 * h);
    x[i] = keep;
    g[i] = (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h);
  }
  return g;
}

/// A seeded 4x4 batch with D=3 features, C=3 classes and one IGNORE pixel.
inline Batch small_batch(std::uint64_t seed, int size = 4, int dim = 3, int classes = 3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_int_distribution<int> uc(0, classes - 1);
  Batch b;
  b.features.image_height = size;
  b.features.values = Grid<double>(size, size, dim);
  for (auto& v : b.features.values.data) v = n01(rng);
  b.labels = LabelMap(size, size);
  for (auto& l : b.labels.labels) l = uc(rng);
  b.labels.labels[5] = kIgnore;
  return b;
}

/// The objective whose gradient compute_step reports for the segmentation
/// model: weights frozen at the base point when detached; otherwise the
/// stage-1 weights flow and only the stage-2 divisor is frozen.
struct SurrogateAnchor {
  std::vector<double> final_w;
  double lp_l1 = 1.0;
};

inline double net_surrogate(const Models& m, const Batch& b, const TrainConfig& cfg, long t,
                            const SurrogateAnchor* anchor, SurrogateAnchor* record) {
  const auto out = forward(m.net, b.features);
  const auto p = softmax(out.scores);
  const auto l = compute_loss(cfg.loss, p, b.labels, cfg.loss.kind == LossKind::kKl ? &out.uncertainty : nullptr);
  const auto v = confidence(p, cfg.indicator);
  const auto& st = cfg.strategy;
  const bool warm = in_warmup(cfg, t);
  std::vector<double> w;
  double lp_l1 = 1.0;
  bool flowing = false;
  if (st.reweighter() && !warm) {
    const auto raw = st.kind == StrategyKind::kArm ? arm_forward(m.arm, v, l.valid) : linear_arm(st.linear, v, l.valid);
    const auto nw = normalize_weights(raw, NormConstraint{st.p_norm});
    w = nw.final.w;
    lp_l1 = nw.lp_l1_norm;
    if (!cfg.detach) {
      flowing = true;
      w = nw.lp.w;
    }
  } else if (st.kind == StrategyKind::kOhem && !warm) {
    w = ohem_weights(l, p, b.labels, st.ohem_keep, st.ohem_min_frac).w;
  } else {
    w = uniform_weights(l.valid).w;
  }
  if (record) {
    record->final_w = w;
    record->lp_l1 = lp_l1;
  }
  double q = 0.0;
  for (std::size_t i = 0; i < l.pixels(); ++i) {
    if (!l.valid[i]) continue;
    const double wi = flowing ? w[i] / (anchor ? anchor->lp_l1 : lp_l1) : (anchor ? anchor->final_w[i] : w[i]);
    q += wi * l.loss[i];
  }
  return q;
}

/// Q as a function of the reweighter parameters with the loss map fixed.
inline double arm_surrogate(const ArmParams& theta, const ConfidenceMap& v, const LossMap& l, double p, double lp_l1) {
  const auto nw = normalize_weights(arm_forward(theta, v, l.valid), NormConstraint{p});
  double q = 0.0;
  for (std::size_t i = 0; i < l.pixels(); ++i)
    if (l.valid[i]) q += nw.lp.w[i] / lp_l1 * l.loss[i];
  return q;
}

struct GradientCase {
  std::string name;
  StrategyKind strategy = StrategyKind::kUniform;
  bool detach = true;
  LossKind loss = LossKind::kCrossEntropy;
  bool conv = false;
  double p_norm = 2.0;
};

inline std::vector<GradientCase> gradient_cases() {
  std::vector<GradientCase> out;
  for (bool conv : {false, true}) {
    const std::string tag = conv ? " conv3x3" : " 1x1";
    out.push_back({"uniform ce" + tag, StrategyKind::kUniform, true, LossKind::kCrossEntropy, conv, 2.0});
    out.push_back({"uniform gce" + tag, StrategyKind::kUniform, true, LossKind::kGce, conv, 2.0});
    out.push_back({"uniform kl" + tag, StrategyKind::kUniform, true, LossKind::kKl, conv, 2.0});
    for (bool detach : {true, false}) {
      const std::string d = detach ? " detach" : " no-detach";
      out.push_back({"linear_arm ce" + d + tag, StrategyKind::kLinearArm, detach, LossKind::kCrossEntropy, conv, 2.0});
      out.push_back({"arm ce" + d + tag, StrategyKind::kArm, detach, LossKind::kCrossEntropy, conv, 2.0});
      out.push_back({"arm kl p=3" + d + tag, StrategyKind::kArm, detach, LossKind::kKl, conv, 3.0});
    }
  }
  return out;
}

struct GradientResult {
  double net = 0.0;
  double arm = 0.0;  ///< 0 for strategies without learnable reweighter
};

/// Analytic vs finite-difference gradients of one training step on a seeded
/// 4x4 instance, after warmup.
inline GradientResult check_step_gradients(const GradientCase& gc, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.iterations = 100;
  cfg.strategy.kind = gc.strategy;
  cfg.strategy.p_norm = gc.p_norm;
  cfg.detach = gc.detach;
  cfg.loss.kind = gc.loss;
  cfg.loss.gce_q = 0.7;
  cfg.conv3x3 = gc.conv;
  cfg.seed = seed;
  const long t = 50;
  ToyNetConfig nc;
  nc.in_dim = 3;
  nc.hidden = 5;
  nc.classes = 3;
  nc.kl_head = gc.loss == LossKind::kKl;
  nc.conv3x3 = gc.conv;
  Models m = Models::initialized(cfg, nc);
  m.arm = ArmParams::initialized(mix_seed(seed, 3), 1.0);
  const auto b = small_batch(mix_seed(seed, 1));

  const auto g = compute_step(m, b, cfg, t);
  SurrogateAnchor anchor;
  net_surrogate(m, b, cfg, t, nullptr, &anchor);
  Models probe = m;
  const auto fd = central_diff(probe.net.flat, [&] { return net_surrogate(probe, b, cfg, t, &anchor, nullptr); });
  GradientResult r;
  r.net = max_rel_error(g.net_grad, fd);

  if (g.arm_trains) {
    const auto out = forward(m.net, b.features);
    const auto p = softmax(out.scores);
    const auto l = compute_loss(cfg.loss, p, b.labels, cfg.loss.kind == LossKind::kKl ? &out.uncertainty : nullptr);
    const auto v = confidence(p, cfg.indicator);
    const auto nw = normalize_weights(arm_forward(m.arm, v, l.valid), NormConstraint{gc.p_norm});
    ArmParams a = m.arm;
    const auto fda = central_diff(a.values, [&] { return arm_surrogate(a, v, l, gc.p_norm, nw.lp_l1_norm); });
    r.arm = max_rel_error(g.arm_grad, fda);
  }
  return r;
}

inline VerifyReport verify_gradients(std::uint64_t seed = 1) {
  VerifyReport r{"gradients", {}};
  constexpr double kTol = 1e-5;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);

  // Per-pixel losses with respect to the scores (and log s for KL).
  double loss_err = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> z(4);
    for (auto& x : z) x = 2.0 * n01(rng);
    const int gt = trial % 4;
    std::vector<double> ls = {0.5 * n01(rng)};
    for (const LossSpec spec : {LossSpec{LossKind::kCrossEntropy}, LossSpec{LossKind::kGce, 0.1},
                                LossSpec{LossKind::kGce, 0.7}, LossSpec{LossKind::kKl}}) {
      auto value = [&] {
        ScoreMap s(1, 1, 4);
        for (int c = 0; c < 4; ++c) s.values.at(0, c) = z[static_cast<std::size_t>(c)];
        const auto p = softmax(s);
        return pixel_loss(spec, p.values.row(0), gt, ls[0]);
      };
      ScoreMap s(1, 1, 4);
      for (int c = 0; c < 4; ++c) s.values.at(0, c) = z[static_cast<std::size_t>(c)];
      const auto p = softmax(s);
      std::vector<double> dz(4);
      double dls = 0.0;
      pixel_loss_grad(spec, p.values.row(0), gt, ls[0], 1.0, dz, &dls);
      loss_err = std::max(loss_err, max_rel_error(dz, central_diff(z, value)));
      if (spec.kind == LossKind::kKl) loss_err = std::max(loss_err, max_rel_error(std::vector<double>{dls}, central_diff(ls, value)));
    }
  }
  r.lines.push_back({"losses wrt scores", loss_err, kTol, true});

  // Confidence indicators with respect to the likelihoods.
  double ind_err = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> pv(5);
    double sum = 0.0;
    for (auto& x : pv) sum += x = 0.05 + std::abs(n01(rng));
    for (auto& x : pv) x /= sum;
    for (auto kind : {IndicatorKind::kVariance, IndicatorKind::kStd, IndicatorKind::kLogVariance, IndicatorKind::kEntropy}) {
      std::vector<double> ga(5);
      indicator_gradient(pv, kind, ga);
      ind_err = std::max(ind_err, max_rel_error(ga, central_diff(pv, [&] { return indicator_value(pv, kind); })));
    }
  }
  r.lines.push_back({"indicators wrt likelihoods", ind_err, kTol, true});

  // Reweighter network: parameters and input.
  double arm_err = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    auto theta = ArmParams::initialized(mix_seed(seed, 100 + trial), 1.0);
    for (std::size_t k = 0; k < theta.values.size(); ++k) theta.values[k] += 0.1 * n01(rng);
    std::vector<double> v = {std::tanh(n01(rng))};
    std::array<double, 53> ga{};
    const double dv = arm_backward(theta, v[0], 1.0, ga);
    arm_err = std::max(arm_err, max_rel_error(ga, central_diff(theta.values, [&] { return arm_eval(theta, v[0]); })));
    arm_err = std::max(arm_err, max_rel_error(std::vector<double>{dv}, central_diff(v, [&] { return arm_eval(theta, v[0]); })));
  }
  r.lines.push_back({"ARM network wrt parameters and input", arm_err, kTol, true});

  // End-to-end training step.
  double net_err = 0.0, arm_step_err = 0.0;
  for (const auto& gc : gradient_cases()) {
    const auto res = check_step_gradients(gc, seed);
    net_err = std::max(net_err, res.net);
    arm_step_err = std::max(arm_step_err, res.arm);
    r.lines.push_back({"step " + gc.name, std::max(res.net, res.arm), kTol, true});
  }
  r.lines.push_back({"toy model end to end (max)", net_err, kTol, true});
  r.lines.push_back({"ARM through stage-1 normalization (max)", arm_step_err, kTol, true});
  return r;
}

}  // namespace armforge
