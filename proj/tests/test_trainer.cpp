#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "armforge/trainer.hpp"
#include "oracles.hpp"

using namespace armforge;

namespace {

Batch seeded_batch(std::uint64_t seed, int side = 4, int dim = 3, int classes = 3, int images = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  Batch b{FeatureMap{Grid<double>(images * side, side, dim), side}, LabelMap(images * side, side)};
  for (auto& x : b.features.values.data) x = n(rng);
  for (auto& l : b.labels.labels) l = static_cast<int>(rng() % static_cast<unsigned>(classes));
  b.labels.labels[5] = kIgnore;
  return b;
}

Models small_models(const TrainConfig& cfg, bool kl = false, bool conv = false) {
  ToyNetConfig nc{3, 5, 3, kl, conv};
  return Models::initialized(cfg, nc);
}

TrainConfig step_config(StrategyKind kind) {
  TrainConfig cfg;
  cfg.iterations = 100;
  cfg.strategy.kind = kind;
  cfg.arm_init_scale = 1.0;
  return cfg;
}

/// Q(theta_S) written out from the public pieces. Weights either come from a
/// frozen map (detach on) or are recomputed from the current likelihoods with
/// the stage-2 divisor frozen (detach off).
double objective(const Models& m, const Batch& b, const TrainConfig& cfg, const std::vector<double>* frozen_w,
                 double frozen_l1) {
  const auto out = forward(m.net, b.features);
  const auto p = softmax(out.scores);
  const auto l = compute_loss(cfg.loss, p, b.labels, cfg.loss.kind == LossKind::kKl ? &out.uncertainty : nullptr);
  std::vector<double> w;
  if (frozen_w) {
    w = *frozen_w;
  } else {
    const auto v = confidence(p, cfg.indicator);
    const auto raw = cfg.strategy.kind == StrategyKind::kArm ? arm_forward(m.arm, v, l.valid)
                                                             : linear_arm(cfg.strategy.linear, v, l.valid);
    const double norm = lp_norm(raw.w, cfg.strategy.p_norm, raw.valid);
    w.resize(raw.pixels());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = raw.w[i] / norm / frozen_l1;
  }
  double q = 0;
  for (std::size_t i = 0; i < l.pixels(); ++i)
    if (l.valid[i]) q += w[i] * l.loss[i];
  return q;
}

struct Frozen {
  std::vector<double> final_w;
  double lp_l1 = 0;
};

Frozen freeze(const Models& m, const Batch& b, const TrainConfig& cfg) {
  const auto out = forward(m.net, b.features);
  const auto p = softmax(out.scores);
  const auto l = compute_loss(cfg.loss, p, b.labels, cfg.loss.kind == LossKind::kKl ? &out.uncertainty : nullptr);
  const auto v = confidence(p, cfg.indicator);
  const auto raw = cfg.strategy.kind == StrategyKind::kArm ? arm_forward(m.arm, v, l.valid)
                                                           : linear_arm(cfg.strategy.linear, v, l.valid);
  const auto nw = normalize_weights(raw, NormConstraint{cfg.strategy.p_norm});
  return {nw.final.w, nw.lp_l1_norm};
}

Dataset tiny_dataset(int radius = 1) {
  DatasetConfig dc;
  dc.train_scenes = 4;
  dc.val_scenes = 2;
  dc.height = dc.width = 16;
  dc.regions = 4;
  dc.classes = 3;
  dc.noise.radius = radius;
  return build_dataset(dc);
}

}  // namespace

TEST(LrSchedule, Examples) {
  EXPECT_DOUBLE_EQ(lr_schedule(0, 1000, 0.02), 0.0002);
  EXPECT_DOUBLE_EQ(lr_schedule(50, 1000, 0.02), 0.02);
  EXPECT_DOUBLE_EQ(lr_schedule(750, 1000, 0.02), 0.002);
  EXPECT_DOUBLE_EQ(lr_schedule(950, 1000, 0.02), 0.0002);
  EXPECT_DOUBLE_EQ(lr_schedule(599, 1000, 0.02), 0.02);
  EXPECT_DOUBLE_EQ(lr_schedule(600, 1000, 0.02), 0.002);
  EXPECT_DOUBLE_EQ(lr_schedule(900, 1000, 0.02), 0.0002);
  EXPECT_THROW(lr_schedule(1000, 1000, 0.02), std::invalid_argument);
  EXPECT_THROW(lr_schedule(-1, 1000, 0.02), std::invalid_argument);
}

TEST(LrSchedule, ContinuousWarmupThenTwoDownwardSteps) {
  const long T = 2000;
  int drops = 0;
  double prev = lr_schedule(0, T, 0.1);
  for (long t = 1; t < T; ++t) {
    const double lr = lr_schedule(t, T, 0.1);
    if (t <= 100) {
      EXPECT_GT(lr, prev);
      EXPECT_LE(lr - prev, 0.1 * 0.99 / 100 + 1e-15);
    } else if (lr < prev) {
      ++drops;
      EXPECT_NEAR(prev / lr, 10.0, 1e-12);
    } else {
      EXPECT_EQ(lr, prev);
    }
    prev = lr;
  }
  EXPECT_EQ(drops, 2);
}

TEST(Ohem, ThresholdAndFallbackPaths) {
  LikelihoodMap p{Grid<double>(1, 2, 2)};
  p.values.data = {0.5, 0.5, 0.9, 0.1};
  LabelMap gt(1, 2);
  gt.labels = {0, 0};
  LossMap l{{ce_value(0.5), ce_value(0.9)}, {1, 1}};
  EXPECT_EQ(ohem_weights(l, p, gt, 0.7, 0.1).w, (std::vector<double>{1.0, 0.0}));

  // All easy: the hardest 10% survive.
  const int n = 50;
  LikelihoodMap q{Grid<double>(1, n, 2)};
  LabelMap g2(1, n);
  LossMap l2{std::vector<double>(n), std::vector<std::uint8_t>(n, 1)};
  for (int i = 0; i < n; ++i) {
    const double pg = 0.9 + 0.001 * i;
    q.values.at(static_cast<std::size_t>(i), 0) = pg;
    q.values.at(static_cast<std::size_t>(i), 1) = 1 - pg;
    l2.loss[static_cast<std::size_t>(i)] = ce_value(pg);
  }
  const auto w = ohem_weights(l2, q, g2, 0.7, 0.1);
  for (int i = 0; i < n; ++i) EXPECT_DOUBLE_EQ(w.w[static_cast<std::size_t>(i)], i < 5 ? 0.2 : 0.0);
  EXPECT_THROW(ohem_weights(l2, q, g2, 1.0, 0.1), std::invalid_argument);
  EXPECT_THROW(ohem_weights(l2, q, g2, 0.7, 0.0), std::invalid_argument);
}

TEST(Ohem, GoldenMapOnSeededBatch) {
  TrainConfig cfg = step_config(StrategyKind::kOhem);
  const auto m = small_models(cfg);
  const auto b = seeded_batch(61, 8);
  const auto p = softmax(forward(m.net, b.features).scores);
  const auto l = compute_loss(cfg.loss, p, b.labels);
  const auto w = ohem_weights(l, p, b.labels, 0.34, 0.1);
  std::string kept;
  double sum = 0;
  for (std::size_t i = 0; i < w.pixels(); ++i) {
    kept += w.w[i] > 0 ? '1' : '0';
    sum += w.w[i];
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_EQ(w.w[5], 0.0);  // IGNORE pixel
  EXPECT_EQ(kept, "1011101101101101111101011011010110111001111101110011011111011110");
}

TEST(TrainStep, UniformIsPlainMeanLossGradient) {
  TrainConfig cfg = step_config(StrategyKind::kUniform);
  auto m = small_models(cfg);
  const auto b = seeded_batch(62);
  const auto g = compute_step(m, b, cfg, 50);
  const auto fd = oracle::gradient(m.net.flat, [&] {
    const auto p = softmax(forward(m.net, b.features).scores);
    return masked_mean(compute_loss(cfg.loss, p, b.labels));
  });
  EXPECT_LT(oracle::rel_error(g.net_grad, fd), 1e-6);
  EXPECT_FALSE(g.arm_trains);
  EXPECT_DOUBLE_EQ(g.stats.weight_entropy, 1.0);
}

TEST(TrainStep, DetachOnIgnoresWeightPath) {
  for (auto kind : {StrategyKind::kArm, StrategyKind::kLinearArm}) {
    for (bool conv : {false, true}) {
      TrainConfig cfg = step_config(kind);
      cfg.conv3x3 = conv;
      auto m = small_models(cfg, false, conv);
      const auto b = seeded_batch(63);
      const auto g = compute_step(m, b, cfg, 50);
      const auto fz = freeze(m, b, cfg);
      const auto fd = oracle::gradient(m.net.flat, [&] { return objective(m, b, cfg, &fz.final_w, 0); });
      EXPECT_LT(oracle::rel_error(g.net_grad, fd), 1e-5) << to_string(kind) << " conv=" << conv;
      // The full graph has a different gradient, so the check above is not vacuous.
      const auto full = oracle::gradient(m.net.flat, [&] { return objective(m, b, cfg, nullptr, fz.lp_l1); });
      EXPECT_GT(oracle::rel_error(g.net_grad, full), 1e-4) << to_string(kind);
    }
  }
}

TEST(TrainStep, DetachOffMatchesFullGraph) {
  for (auto kind : {StrategyKind::kArm, StrategyKind::kLinearArm}) {
    for (LossKind loss : {LossKind::kCrossEntropy, LossKind::kKl}) {
      TrainConfig cfg = step_config(kind);
      cfg.detach = false;
      cfg.loss.kind = loss;
      auto m = small_models(cfg, loss == LossKind::kKl);
      const auto b = seeded_batch(64);
      const auto g = compute_step(m, b, cfg, 50);
      const auto fz = freeze(m, b, cfg);
      const auto fd = oracle::gradient(m.net.flat, [&] { return objective(m, b, cfg, nullptr, fz.lp_l1); });
      EXPECT_LT(oracle::rel_error(g.net_grad, fd), 1e-5) << to_string(kind) << " " << to_string(loss);
    }
  }
}

TEST(TrainStep, ArmGradientMatchesFiniteDifferences) {
  TrainConfig cfg = step_config(StrategyKind::kArm);
  cfg.strategy.p_norm = 3.0;
  auto m = small_models(cfg);
  const auto b = seeded_batch(65);
  const auto g = compute_step(m, b, cfg, 50);
  ASSERT_TRUE(g.arm_trains);
  const auto fz = freeze(m, b, cfg);
  const auto fd = oracle::gradient(m.arm.values, [&] { return objective(m, b, cfg, nullptr, fz.lp_l1); });
  EXPECT_LT(oracle::rel_error({g.arm_grad.begin(), g.arm_grad.end()}, fd), 1e-5);
}

TEST(TrainStep, WarmupIsolation) {
  TrainConfig cfg = step_config(StrategyKind::kArm);
  ASSERT_TRUE(in_warmup(cfg, 4));
  ASSERT_FALSE(in_warmup(cfg, 5));
  auto m = small_models(cfg);
  const auto b = seeded_batch(66);
  const auto g = compute_step(m, b, cfg, 2);
  // theta_S sees uniform weights whatever the reweighter holds.
  Models other = m;
  other.arm = ArmParams::initialized(99, 1.0);
  EXPECT_EQ(compute_step(other, b, cfg, 2).net_grad, g.net_grad);
  cfg.strategy.kind = StrategyKind::kUniform;
  EXPECT_EQ(compute_step(m, b, cfg, 2).net_grad, g.net_grad);
  cfg.strategy.kind = StrategyKind::kArm;
  // The reweighter still learns, unless the freezing reading is selected.
  EXPECT_TRUE(g.arm_trains);
  bool any = false;
  for (double x : g.arm_grad) any = any || x != 0.0;
  EXPECT_TRUE(any);
  cfg.warmup_freeze_arm = true;
  EXPECT_FALSE(compute_step(m, b, cfg, 2).arm_trains);
  EXPECT_TRUE(compute_step(m, b, cfg, 50).arm_trains);
  // After warmup the reweighter does drive theta_S.
  cfg.warmup_freeze_arm = false;
  EXPECT_NE(compute_step(other, b, cfg, 50).net_grad, compute_step(m, b, cfg, 50).net_grad);
}

TEST(TrainStep, AdversarialStepIncreasesObjective) {
  TrainConfig cfg = step_config(StrategyKind::kArm);
  cfg.base_lr = 0.01;
  auto m = small_models(cfg);
  const auto b = seeded_batch(67, 6);
  const auto fz = freeze(m, b, cfg);
  const double before = objective(m, b, cfg, nullptr, fz.lp_l1);
  Models after = m;
  train_step(after, b, cfg, 50);
  after.net = m.net;  // hold theta_S fixed
  EXPECT_GT(objective(after, b, cfg, nullptr, fz.lp_l1), before);
  EXPECT_NE(after.arm.values, m.arm.values);

  cfg.arm_ascent = false;
  Models down = m;
  train_step(down, b, cfg, 50);
  down.net = m.net;
  EXPECT_LT(objective(down, b, cfg, nullptr, fz.lp_l1), before);
}

TEST(TrainStep, NonFiniteBatchAbortsWithoutMoving) {
  TrainConfig cfg = step_config(StrategyKind::kArm);
  auto m = small_models(cfg);
  auto b = seeded_batch(68);
  b.features.values.data[3] = std::nan("");
  const auto net0 = m.net.flat;
  const auto arm0 = m.arm.values;
  EXPECT_TRUE(train_step(m, b, cfg, 50).aborted);
  EXPECT_EQ(m.net.flat, net0);
  EXPECT_EQ(m.arm.values, arm0);
}

TEST(SignAblation, DescentLearnsOppositeCurve) {
  // Fixed decreasing loss profile over v: ascent favours low v, descent high v.
  const int bins = 20;
  std::vector<double> v(bins);
  LossMap l{std::vector<double>(bins), std::vector<std::uint8_t>(bins, 1)};
  for (int b = 0; b < bins; ++b) {
    v[static_cast<std::size_t>(b)] = -1 + (b + 0.5) * 0.1;
    l.loss[static_cast<std::size_t>(b)] = 2.0 - 0.09 * b;
  }
  ConfidenceMap cv{1, bins, 3, IndicatorKind::kVariance, true, v};
  auto up = ArmParams::initialized(5, 1.0), down = up;
  ArmOptimizer ou, od;
  for (int s = 0; s < 2000; ++s) {
    up = adversarial_update(up, arm_gradient(up, cv, l, NormConstraint::l2()), 0.05, ou);
    down.values = momentum_step(down.values, arm_gradient(down, cv, l, NormConstraint::l2()), 0.05, od);
  }
  EXPECT_GT(arm_eval(up, -0.95), arm_eval(up, 0.95));
  EXPECT_LT(arm_eval(down, -0.95), arm_eval(down, 0.95));
}

TEST(Experiment, DeterministicAndCadence) {
  const auto ds = tiny_dataset();
  TrainConfig cfg;
  cfg.iterations = 60;
  cfg.eval_interval = 25;
  cfg.hidden = 4;
  cfg.histogram_scenes = 2;
  cfg.strategy.kind = StrategyKind::kArm;
  const auto a = run_experiment(cfg, ds), b = run_experiment(cfg, ds);
  ASSERT_EQ(a.evals.size(), 3u);  // 25, 50, 60
  EXPECT_EQ(a.evals[0].iteration, 25);
  EXPECT_EQ(a.evals[2].iteration, 60);
  ASSERT_EQ(a.evals.size(), b.evals.size());
  for (std::size_t i = 0; i < a.evals.size(); ++i) {
    EXPECT_EQ(a.evals[i].miou, b.evals[i].miou);
    EXPECT_EQ(a.evals[i].mean_loss, b.evals[i].mean_loss);
    EXPECT_EQ(a.evals[i].weight_entropy, b.evals[i].weight_entropy);
  }
  EXPECT_EQ(a.final_scores.miou, b.final_scores.miou);
  EXPECT_EQ(a.arm.values, b.arm.values);
  EXPECT_EQ(a.net.flat, b.net.flat);
  EXPECT_EQ(a.weight_curve_v.size(), 41u);
  EXPECT_EQ(a.dataset_fingerprint, ds.config.fingerprint());
  cfg.seed = 2;
  EXPECT_NE(run_experiment(cfg, ds).net.flat, a.net.flat);
}

TEST(Experiment, DefaultEvalCadence) {
  TrainConfig cfg;
  cfg.iterations = 3000;
  EXPECT_EQ(cfg.resolved_eval_interval(), 100);
  cfg.iterations = 20000;
  EXPECT_EQ(cfg.resolved_eval_interval(), 400);
  EXPECT_EQ(cfg.warmup_iterations(), 1000);
}

TEST(Collapse, Rules) {
  TrainConfig cfg;
  cfg.iterations = 1000;
  RunRecord r;
  EXPECT_FALSE(detect_collapse(r, cfg));
  r.aborted_steps = 11;
  EXPECT_TRUE(detect_collapse(r, cfg));
  r.aborted_steps = 0;
  r.tail_mean_raw_weight = 0.05;
  EXPECT_FALSE(detect_collapse(r, cfg));  // uniform ignores reweighter stats
  cfg.strategy.kind = StrategyKind::kArm;
  EXPECT_TRUE(detect_collapse(r, cfg));
  r.tail_mean_raw_weight = 0.5;
  r.tail_weight_entropy = 0.3;
  EXPECT_TRUE(detect_collapse(r, cfg));
  r.tail_weight_entropy = 0.9;
  EXPECT_FALSE(detect_collapse(r, cfg));
}

TEST(Config, ValidationAndParsing) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  auto bad = cfg;
  bad.iterations = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.warmup_fraction = 1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.loss = {LossKind::kGce, 1.5};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.strategy.kind = StrategyKind::kArm;
  bad.strategy.p_norm = 0.5;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  for (auto k : {StrategyKind::kUniform, StrategyKind::kOhem, StrategyKind::kLinearArm, StrategyKind::kArm})
    EXPECT_EQ(parse_strategy(to_string(k)), k);
  EXPECT_THROW(parse_strategy("focal"), std::invalid_argument);
  EXPECT_EQ(cfg.canonical(false).find("seed="), std::string::npos);
  EXPECT_NE(cfg.canonical().find("seed=1\n"), std::string::npos);
}
