#pragma once

// Min-max training: the segmentation model descends on sum_i w_i l_i while the
// reweighter ascends on the same quantity with the same learning rate.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "armforge/arm.hpp"
#include "armforge/likelihood_stats.hpp"
#include "armforge/losses.hpp"
#include "armforge/metrics.hpp"
#include "armforge/synth_data.hpp"
#include "armforge/toy_model.hpp"

namespace armforge {

enum class StrategyKind { kUniform, kOhem, kLinearArm, kArm };

inline std::string_view to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::kUniform: return "uniform";
    case StrategyKind::kOhem: return "ohem";
    case StrategyKind::kLinearArm: return "linear_arm";
    case StrategyKind::kArm: return "arm";
  }
  return "?";
}

inline StrategyKind parse_strategy(std::string_view s) {
  if (s == "uniform") return StrategyKind::kUniform;
  if (s == "ohem") return StrategyKind::kOhem;
  if (s == "linear_arm") return StrategyKind::kLinearArm;
  if (s == "arm") return StrategyKind::kArm;
  throw std::invalid_argument("unknown strategy '" + std::string(s) + "' (expected uniform|ohem|linear_arm|arm)");
}

struct StrategyConfig {
  StrategyKind kind = StrategyKind::kUniform;
  double ohem_keep = 0.7;
  double ohem_min_frac = 0.1;
  LinearArmParams linear = LinearArmParams::suppressing();
  double p_norm = 2.0;

  bool reweighter() const { return kind == StrategyKind::kLinearArm || kind == StrategyKind::kArm; }
};

struct TrainConfig {
  int iterations = 600;
  double base_lr = 0.05;
  int batch_size = 2;
  LossSpec loss;
  StrategyConfig strategy;
  IndicatorKind indicator = IndicatorKind::kVariance;
  bool detach = true;
  double warmup_fraction = 0.05;
  /// Warmup reading: false trains the reweighter on detached losses while the
  /// model sees uniform weights; true freezes the reweighter instead.
  bool warmup_freeze_arm = false;
  /// Sign ablation: false makes the reweighter descend on Q.
  bool arm_ascent = true;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double arm_init_scale = 1.0;
  int hidden = 4;
  bool conv3x3 = true;
  int eval_interval = 0;  ///< 0 selects max(T/50, 100)
  int histogram_bins = 20;
  int histogram_scenes = 50;
  std::uint64_t seed = 1;

  void validate() const {
    if (iterations <= 0) throw std::invalid_argument("train: iterations must be > 0");
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
      throw std::invalid_argument("train: warmup fraction must lie in (0, 1)");
    if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
    if (!(base_lr > 0.0)) throw std::invalid_argument("train: base lr must be > 0");
    if (loss.kind == LossKind::kGce) check_gce_q(loss.gce_q);
    if (strategy.kind == StrategyKind::kOhem &&
        !(strategy.ohem_keep > 0 && strategy.ohem_keep < 1 && strategy.ohem_min_frac > 0 &&
          strategy.ohem_min_frac <= 1))
      throw std::invalid_argument("train: OHEM needs 0 < keep < 1 and 0 < min_frac <= 1");
    if (strategy.kind == StrategyKind::kArm && !(strategy.p_norm >= 1.0))
      throw std::invalid_argument("train: p_norm must be >= 1");
  }

  int resolved_eval_interval() const { return eval_interval > 0 ? eval_interval : std::max(iterations / 50, 100); }
  int warmup_iterations() const { return static_cast<int>(std::ceil(warmup_fraction * iterations)); }

  /// Canonical key=value text. The hash used in run file names omits the seed.
  std::string canonical(bool with_seed = true) const {
    std::string s;
    auto num = [](double v) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    auto kv = [&](const char* k, const std::string& v) { s += std::string(k) + "=" + v + "\n"; };
    kv("iterations", std::to_string(iterations));
    kv("base_lr", num(base_lr));
    kv("batch_size", std::to_string(batch_size));
    kv("loss", std::string(to_string(loss.kind)));
    kv("gce_q", num(loss.gce_q));
    kv("strategy", std::string(to_string(strategy.kind)));
    kv("ohem_keep", num(strategy.ohem_keep));
    kv("ohem_min_frac", num(strategy.ohem_min_frac));
    kv("linear_k", num(strategy.linear.k));
    kv("linear_b", num(strategy.linear.b));
    kv("p_norm", num(strategy.p_norm));
    kv("indicator", std::string(to_string(indicator)));
    kv("detach", detach ? "true" : "false");
    kv("warmup_fraction", num(warmup_fraction));
    kv("warmup_freeze_arm", warmup_freeze_arm ? "true" : "false");
    kv("arm_ascent", arm_ascent ? "true" : "false");
    kv("momentum", num(momentum));
    kv("weight_decay", num(weight_decay));
    kv("arm_init_scale", num(arm_init_scale));
    kv("hidden", std::to_string(hidden));
    kv("conv3x3", conv3x3 ? "true" : "false");
    kv("eval_interval", std::to_string(eval_interval));
    kv("histogram_bins", std::to_string(histogram_bins));
    kv("histogram_scenes", std::to_string(histogram_scenes));
    if (with_seed) kv("seed", std::to_string(seed));
    return s;
  }
};

/// Linear warmup from lr/100 to lr over the first `warmup` fraction of T,
/// then lr until 0.6T, lr/10 until 0.9T, lr/100 afterwards.
inline double lr_schedule(long t, long total, double base_lr, double warmup = 0.05) {
  if (total <= 0 || t < 0 || t >= total)
    throw std::invalid_argument("lr_schedule: iteration " + std::to_string(t) + " outside [0, " +
                                std::to_string(total) + ")");
  const double x = static_cast<double>(t) / static_cast<double>(total);
  if (x < warmup) return base_lr / 100.0 + (base_lr - base_lr / 100.0) * x / warmup;
  if (x < 0.6) return base_lr;
  if (x < 0.9) return base_lr / 10.0;
  return base_lr / 100.0;
}

/// Online hard example mining: keep pixels whose ground-truth likelihood is
/// below `keep_threshold`, but never fewer than ceil(min_frac * N) of the
/// valid pixels (hardest first). Kept pixels share the weight equally.
inline WeightMap ohem_weights(const LossMap& l, const LikelihoodMap& p, const LabelMap& gt, double keep_threshold,
                              double min_frac) {
  if (!(keep_threshold > 0 && keep_threshold < 1) || !(min_frac > 0 && min_frac <= 1))
    throw std::invalid_argument("ohem_weights: need 0 < keep < 1 and 0 < min_frac <= 1");
  if (l.pixels() != p.pixels() || gt.pixels() != p.pixels()) throw std::invalid_argument("ohem_weights: size mismatch");
  std::vector<std::size_t> valid_idx;
  for (std::size_t i = 0; i < l.pixels(); ++i)
    if (l.valid[i]) valid_idx.push_back(i);
  if (valid_idx.empty()) throw std::invalid_argument("ohem_weights: no valid pixels");
  auto pg = [&](std::size_t i) { return p.values.at(i, gt.labels[i]); };
  std::vector<std::uint8_t> keep(l.pixels(), 0);
  std::size_t kept = 0;
  for (std::size_t i : valid_idx)
    if (pg(i) < keep_threshold) {
      keep[i] = 1;
      ++kept;
    }
  const auto min_keep = static_cast<std::size_t>(std::ceil(min_frac * static_cast<double>(valid_idx.size()) - 1e-9));
  if (kept < min_keep) {
    std::stable_sort(valid_idx.begin(), valid_idx.end(), [&](std::size_t a, std::size_t b) { return pg(a) < pg(b); });
    std::fill(keep.begin(), keep.end(), 0);
    for (std::size_t k = 0; k < min_keep; ++k) keep[valid_idx[k]] = 1;
    kept = min_keep;
  }
  WeightMap out{std::vector<double>(l.pixels(), 0.0), l.valid, NormState::kFinal};
  for (std::size_t i = 0; i < l.pixels(); ++i)
    if (keep[i]) out.w[i] = 1.0 / static_cast<double>(kept);
  return out;
}

struct Batch {
  FeatureMap features;
  LabelMap labels;
};

inline Batch make_batch(std::span<const SceneSample* const> scenes, bool fine_labels = false) {
  std::vector<const FeatureMap*> f;
  std::vector<const LabelMap*> l;
  for (const SceneSample* s : scenes) {
    f.push_back(&s->features);
    l.push_back(fine_labels ? &s->fine : &s->coarse);
  }
  return {stack_features(f), stack_labels(l)};
}

struct Models {
  ToyNetParams net;
  SgdState net_opt;
  ArmParams arm;
  ArmOptimizer arm_opt;

  static Models initialized(const TrainConfig& cfg, const ToyNetConfig& net_cfg) {
    Models m;
    m.net = ToyNetParams::initialized(net_cfg, mix_seed(cfg.seed, 0x6e6574u));
    m.net_opt.momentum = cfg.momentum;
    m.net_opt.weight_decay = cfg.weight_decay;
    m.arm = ArmParams::initialized(mix_seed(cfg.seed, 0x61726du), cfg.arm_init_scale);
    m.arm_opt.momentum = cfg.momentum;
    return m;
  }
};

struct StepStats {
  bool aborted = false;
  double objective = 0.0;        ///< Q = sum_i final_i l_i
  double mean_loss = 0.0;        ///< uniform mean of the loss map
  double weight_entropy = 1.0;   ///< entropy of the final weights / ln N
  double mean_raw_weight = 1.0;  ///< mean reweighter output over valid pixels
};

/// Everything one step computes before any parameter moves. Exposed so tests
/// can check gradients against finite differences of `objective`.
struct StepGradients {
  StepStats stats;
  std::vector<double> net_grad;
  std::array<double, 53> arm_grad{};
  bool arm_trains = false;
};

namespace detail {

inline double normalized_entropy(std::span<const double> w, std::span<const std::uint8_t> valid) {
  double h = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!valid[i]) continue;
    ++n;
    if (w[i] > 0) h -= w[i] * std::log(w[i]);
  }
  return n > 1 ? h / std::log(static_cast<double>(n)) : 1.0;
}

}  // namespace detail

inline bool in_warmup(const TrainConfig& cfg, long t) { return t < cfg.warmup_iterations(); }

/// Forward + backward for one batch at iteration t (no parameter update).
inline StepGradients compute_step(const Models& m, const Batch& batch, const TrainConfig& cfg, long t) {
  StepGradients out;
  ToyNetCache cache;
  const auto fwd = forward(m.net, batch.features, &cache);
  const auto p = softmax(fwd.scores);
  const int classes = p.classes();
  const auto v = confidence(p, cfg.indicator);
  const auto l = compute_loss(cfg.loss, p, batch.labels, cfg.loss.kind == LossKind::kKl ? &fwd.uncertainty : nullptr);
  const std::size_t n = l.pixels();

  const bool warm = in_warmup(cfg, t);
  const auto& st = cfg.strategy;
  std::optional<NormalizedWeights> nw;
  if (st.kind == StrategyKind::kArm) {
    nw = normalize_weights(arm_forward(m.arm, v, l.valid), NormConstraint{st.p_norm});
  } else if (st.kind == StrategyKind::kLinearArm) {
    nw = normalize_weights(linear_arm(st.linear, v, l.valid), NormConstraint{st.p_norm});
  }

  // Weights that drive the segmentation model this step.
  WeightMap final_w;
  const bool use_reweighter = st.reweighter() && !warm;
  if (use_reweighter) {
    final_w = nw->final;
  } else if (st.kind == StrategyKind::kOhem) {
    final_w = ohem_weights(l, p, batch.labels, st.ohem_keep, st.ohem_min_frac);
  } else {
    final_w = uniform_weights(l.valid);
  }

  auto& s = out.stats;
  s.objective = masked_mean(l, final_w.w);
  s.mean_loss = masked_mean(l);
  s.weight_entropy = detail::normalized_entropy(final_w.w, l.valid);
  if (nw) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (l.valid[i]) acc += nw->raw.w[i];
    s.mean_raw_weight = acc / static_cast<double>(l.valid_count());
  }

  // dQ/draw_i via stage 1 (stage-2 divisor constant); shared by both players.
  std::vector<double> draw;
  if (nw) {
    std::vector<double> dfinal(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      if (l.valid[i]) dfinal[i] = l.loss[i];
    draw = nw->backward_to_raw(dfinal);
  }

  // Segmentation model: dQ/dscores.
  const int outs = m.net.config.outputs();
  Eigen::MatrixXd upstream = Eigen::MatrixXd::Zero(outs, static_cast<Eigen::Index>(n));
  std::vector<double> dz(static_cast<std::size_t>(classes)), dp(static_cast<std::size_t>(classes)),
      dz2(static_cast<std::size_t>(classes));
  const bool through_weights = use_reweighter && !cfg.detach;
  for (std::size_t i = 0; i < n; ++i) {
    if (!l.valid[i]) continue;
    const auto prow = p.values.row(i);
    const double log_s = cfg.loss.kind == LossKind::kKl ? fwd.uncertainty.log_s[i] : 0.0;
    double dlog_s = 0.0;
    pixel_loss_grad(cfg.loss, prow, batch.labels.labels[i], log_s, final_w.w[i], dz, &dlog_s);
    if (through_weights) {
      // l_i dfinal_i/dv_i, routed through the indicator and the softmax.
      const double slope = st.kind == StrategyKind::kArm ? [&] {
        std::array<double, 53> scratch{};
        return arm_backward(m.arm, v.values[i], 1.0, scratch);
      }()
                                                         : st.linear.slope(v.values[i]);
      const double dv = draw[i] * slope;
      indicator_gradient(prow, cfg.indicator, dp);
      for (auto& x : dp) x *= dv;
      softmax_backward(prow, dp, dz2);
      for (int c = 0; c < classes; ++c) dz[static_cast<std::size_t>(c)] += dz2[static_cast<std::size_t>(c)];
    }
    const auto col = static_cast<Eigen::Index>(i);
    for (int c = 0; c < classes; ++c) upstream(c, col) = dz[static_cast<std::size_t>(c)];
    if (cfg.loss.kind == LossKind::kKl) upstream(outs - 1, col) = dlog_s;
  }
  out.net_grad = backward(m.net, cache, upstream);

  // Reweighter: dQ/dtheta_W against the detached loss map.
  out.arm_trains = st.kind == StrategyKind::kArm && !(warm && cfg.warmup_freeze_arm);
  if (out.arm_trains) {
    for (std::size_t i = 0; i < n; ++i)
      if (l.valid[i] && draw[i] != 0.0) arm_backward(m.arm, v.values[i], draw[i], out.arm_grad);
  }
  return out;
}

/// One simultaneous min-max step. Non-finite maps or gradients abort the step
/// and leave every parameter untouched.
inline StepStats train_step(Models& m, const Batch& batch, const TrainConfig& cfg, long t) {
  StepGradients g;
  try {
    g = compute_step(m, batch, cfg, t);
  } catch (const std::invalid_argument&) {
    // softmax rejects non-finite scores; normalization rejects all-zero maps.
    StepStats s;
    s.aborted = true;
    return s;
  }
  if (!std::isfinite(g.stats.objective) || !all_finite(g.net_grad) || !all_finite(g.arm_grad)) {
    g.stats.aborted = true;
    return g.stats;
  }
  const double lr = lr_schedule(t, cfg.iterations, cfg.base_lr, cfg.warmup_fraction);
  sgd_step(m.net, g.net_grad, lr, m.net_opt);
  if (g.arm_trains) {
    if (cfg.arm_ascent)
      m.arm = adversarial_update(m.arm, g.arm_grad, lr, m.arm_opt);
    else
      m.arm.values = momentum_step(m.arm.values, g.arm_grad, lr, m.arm_opt);
  }
  return g.stats;
}

// ---------------------------------------------------------------------------
// Experiments.

struct EvalPoint {
  long iteration = 0;
  double lr = 0.0;
  double aacc = 0.0, macc = 0.0, miou = 0.0;
  double mean_loss = 0.0;       ///< mean training loss since the previous eval
  double weight_entropy = 0.0;  ///< mean normalized weight entropy since the previous eval
  double mean_raw_weight = 0.0;
};

struct RunRecord {
  std::string config_echo;
  std::uint64_t seed = 0;
  std::uint64_t dataset_fingerprint = 0;
  std::vector<EvalPoint> evals;
  SegmentationScores final_scores;
  VarianceHistogram histogram;          ///< training-set loss vs confidence
  std::vector<double> weight_curve_v;   ///< v grid for reweighter strategies
  std::vector<double> weight_curve_w;
  double tail_mean_raw_weight = 1.0;    ///< over the last 10% of iterations
  double tail_weight_entropy = 1.0;
  long aborted_steps = 0;
  bool collapsed = false;
  double wall_seconds = 0.0;            ///< not part of the persisted record
  ArmParams arm;
  ToyNetParams net;
};

inline SegmentationScores evaluate(const ToyNetParams& net, const std::vector<SceneSample>& scenes, int classes) {
  ConfusionMatrix cm(classes);
  for (const auto& s : scenes) {
    const auto out = forward(net, s.features);
    cm.accumulate(predict(out.scores), s.fine);
  }
  return scores(cm);
}

inline VarianceHistogram training_histogram(const ToyNetParams& net, const std::vector<SceneSample>& scenes,
                                            const TrainConfig& cfg) {
  VarianceHistogram h;
  const auto count = std::min<std::size_t>(scenes.size(), static_cast<std::size_t>(cfg.histogram_scenes));
  for (std::size_t k = 0; k < count; ++k) {
    const auto& s = scenes[k];
    const auto out = forward(net, s.features);
    const auto p = softmax(out.scores);
    const auto l = compute_loss(cfg.loss, p, s.coarse, cfg.loss.kind == LossKind::kKl ? &out.uncertainty : nullptr);
    merge_histogram(h, loss_variance_histogram(confidence(p, cfg.indicator), l, cfg.histogram_bins));
  }
  return h;
}

/// Collapse: the reweighter output shrank to < 0.1 on average, the weight
/// mass concentrated (normalized entropy < 0.5) or more than 1% of steps
/// aborted.
inline bool detect_collapse(const RunRecord& r, const TrainConfig& cfg) {
  if (r.aborted_steps * 100 > cfg.iterations) return true;
  if (!cfg.strategy.reweighter()) return false;
  return r.tail_mean_raw_weight < 0.1 || r.tail_weight_entropy < 0.5;
}

inline RunRecord run_experiment(const TrainConfig& cfg, const Dataset& ds) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ToyNetConfig net_cfg;
  net_cfg.in_dim = ds.config.dim;
  net_cfg.hidden = cfg.hidden;
  net_cfg.classes = ds.config.classes;
  net_cfg.kl_head = cfg.loss.kind == LossKind::kKl;
  net_cfg.conv3x3 = cfg.conv3x3;
  Models m = Models::initialized(cfg, net_cfg);

  RunRecord rec;
  rec.config_echo = cfg.canonical();
  rec.seed = cfg.seed;
  rec.dataset_fingerprint = ds.config.fingerprint();

  std::mt19937_64 rng(mix_seed(cfg.seed, 0x62617463u));
  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  const int every = cfg.resolved_eval_interval();
  const long tail_start = cfg.iterations - std::max(1, cfg.iterations / 10);
  double acc_loss = 0, acc_ent = 0, acc_raw = 0, tail_raw = 0, tail_ent = 0;
  long acc_n = 0, tail_n = 0;
  std::vector<const SceneSample*> picked;
  for (long t = 0; t < cfg.iterations; ++t) {
    picked.clear();
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      picked.push_back(&ds.train[order[cursor++]]);
    }
    const auto stats = train_step(m, make_batch(picked), cfg, t);
    if (stats.aborted) {
      ++rec.aborted_steps;
    } else {
      acc_loss += stats.mean_loss;
      acc_ent += stats.weight_entropy;
      acc_raw += stats.mean_raw_weight;
      ++acc_n;
      if (t >= tail_start) {
        tail_raw += stats.mean_raw_weight;
        tail_ent += stats.weight_entropy;
        ++tail_n;
      }
    }
    if ((t + 1) % every == 0 || t + 1 == cfg.iterations) {
      EvalPoint e;
      e.iteration = t + 1;
      e.lr = lr_schedule(t, cfg.iterations, cfg.base_lr, cfg.warmup_fraction);
      const auto sc = evaluate(m.net, ds.val, ds.config.classes);
      e.aacc = sc.aacc;
      e.macc = sc.macc;
      e.miou = sc.miou;
      const double n = acc_n ? static_cast<double>(acc_n) : std::numeric_limits<double>::quiet_NaN();
      e.mean_loss = acc_loss / n;
      e.weight_entropy = acc_ent / n;
      e.mean_raw_weight = acc_raw / n;
      rec.evals.push_back(e);
      acc_loss = acc_ent = acc_raw = 0;
      acc_n = 0;
    }
  }
  rec.final_scores = evaluate(m.net, ds.val, ds.config.classes);
  rec.histogram = training_histogram(m.net, ds.train, cfg);
  if (tail_n) {
    rec.tail_mean_raw_weight = tail_raw / static_cast<double>(tail_n);
    rec.tail_weight_entropy = tail_ent / static_cast<double>(tail_n);
  }
  if (cfg.strategy.reweighter()) {
    for (int k = 0; k <= 40; ++k) {
      const double v = -1.0 + k * 0.05;
      rec.weight_curve_v.push_back(v);
      rec.weight_curve_w.push_back(cfg.strategy.kind == StrategyKind::kArm ? arm_eval(m.arm, v)
                                                                           : cfg.strategy.linear.eval(v));
    }
  }
  rec.collapsed = detect_collapse(rec, cfg);
  rec.arm = m.arm;
  rec.net = m.net;
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

}  // namespace armforge
