#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "armforge/losses.hpp"
#include "oracles.hpp"

using namespace armforge;

namespace {

LikelihoodMap row_map(const std::vector<std::vector<double>>& rows) {
  const int c = static_cast<int>(rows.front().size());
  LikelihoodMap p{Grid<double>(1, static_cast<int>(rows.size()), c)};
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int k = 0; k < c; ++k) p.values.at(i, k) = rows[i][static_cast<std::size_t>(k)];
  return p;
}

LabelMap labels_of(std::vector<int> l) {
  LabelMap m(1, static_cast<int>(l.size()));
  m.labels = std::move(l);
  return m;
}

}  // namespace

TEST(CrossEntropy, Examples) {
  EXPECT_DOUBLE_EQ(ce_value(1.0), 0.0);
  EXPECT_NEAR(ce_value(std::exp(-1.0)), 1.0, 1e-15);
  const auto p = oracle::softmax({std::log(3.0), 0.0});
  auto l = ce_loss(row_map({p}), labels_of({1}));
  EXPECT_NEAR(l.loss[0], -std::log(0.25), 1e-12);
  EXPECT_NEAR(l.loss[0], 1.3863, 1e-4);
}

TEST(CrossEntropy, ClampsZeroProbability) {
  auto l = ce_loss(row_map({{1.0, 0.0}}), labels_of({1}));
  EXPECT_NEAR(l.loss[0], -std::log(1e-12), 1e-9);
  EXPECT_TRUE(std::isfinite(l.loss[0]));
}

TEST(CrossEntropy, IgnoredPixelsAreMaskedOut) {
  auto l = ce_loss(row_map({{0.5, 0.5}, {0.9, 0.1}}), labels_of({kIgnore, 0}));
  EXPECT_EQ(l.valid[0], 0);
  EXPECT_EQ(l.valid[1], 1);
  EXPECT_EQ(l.loss[0], 0.0);
  EXPECT_EQ(l.valid_count(), 1u);
}

TEST(CrossEntropy, ShapeMismatchAndBadLabelRejected) {
  EXPECT_THROW(ce_loss(row_map({{0.5, 0.5}}), labels_of({0, 1})), std::invalid_argument);
  EXPECT_THROW(ce_loss(row_map({{0.5, 0.5}}), labels_of({2})), std::invalid_argument);
  EXPECT_THROW(ce_loss(row_map({{0.5, 0.5}}), labels_of({-1})), std::invalid_argument);
}

TEST(Gce, Examples) {
  for (double q : {0.1, 0.5, 1.0}) EXPECT_DOUBLE_EQ(gce_value(1.0, q), 0.0);
  EXPECT_DOUBLE_EQ(gce_value(0.25, 1.0), 0.75);
  EXPECT_NEAR(gce_value(0.5, 0.1), 0.66967, 1e-5);
  auto l = gce_loss(row_map({{0.5, 0.5}}), labels_of({0}), 0.1);
  EXPECT_NEAR(l.loss[0], (1 - std::pow(0.5, 0.1)) / 0.1, 1e-15);
}

TEST(Gce, RejectsQOutOfRange) {
  auto p = row_map({{0.5, 0.5}});
  auto gt = labels_of({0});
  for (double q : {0.0, -0.1, 1.0001, std::nan("")}) EXPECT_THROW(gce_loss(p, gt, q), std::invalid_argument) << q;
}

TEST(Gce, QOneIsOneMinusPAndSmallQApproachesCe) {
  for (int i = 0; i <= 95; ++i) {
    const double pg = 0.05 + 0.01 * i;
    EXPECT_EQ(gce_value(pg, 1.0), 1.0 - pg);
    EXPECT_LT(std::abs(gce_value(pg, 1e-4) - ce_value(pg)), 1e-3) << pg;
  }
}

TEST(Kl, Examples) {
  EXPECT_NEAR(kl_value(1.0, 2.0), 0.5 + 0.5 * std::log(2.0), 1e-15);
  EXPECT_NEAR(kl_value(1.0, 2.0), 0.84657, 1e-5);
  EXPECT_DOUBLE_EQ(kl_value(0.0, 1.0), 0.0);
  for (double pg : {0.05, 0.3, 0.9}) {
    const double s = kl_optimal_s(pg);
    EXPECT_NEAR(kl_ds(ce_value(pg), s), 0.0, 1e-14);
  }
}

TEST(Kl, MapUsesPerPixelUncertainty) {
  UncertaintyMap s{{std::log(2.0), 0.0}};
  const double e1 = std::exp(-1.0);
  auto l = kl_loss(row_map({{e1, 1 - e1}, {1.0, 0.0}}), s, labels_of({0, 0}));
  EXPECT_NEAR(l.loss[0], 0.84657, 1e-5);
  EXPECT_NEAR(l.loss[1], 0.0, 1e-15);
  UncertaintyMap short_s{{0.0}};
  EXPECT_THROW(kl_loss(row_map({{0.5, 0.5}, {0.5, 0.5}}), short_s, labels_of({0, 0})), std::invalid_argument);
  EXPECT_THROW(compute_loss({LossKind::kKl, 0.1}, row_map({{0.5, 0.5}}), labels_of({0})), std::invalid_argument);
}

TEST(Kl, OptimalUncertainty) {
  EXPECT_NEAR(kl_optimal_s(std::exp(-1.0)), 2.0, 1e-15);
  EXPECT_NEAR(kl_optimal_s(std::exp(-2.0)), 4.0, 1e-15);
  EXPECT_NEAR(kl_optimal_s(0.9), 0.21072, 1e-5);
  EXPECT_THROW(kl_optimal_s(0.0), std::invalid_argument);
  EXPECT_THROW(kl_optimal_s(1.0), std::invalid_argument);
}

TEST(Kl, ImplicitWeightGrowsWithConfidence) {
  // At the optimum the effective CE weight is 1/s, larger for confident pixels.
  double prev = 0;
  for (double pg = 0.05; pg < 0.99; pg += 0.05) {
    const double w = 1.0 / kl_optimal_s(pg);
    EXPECT_GT(w, prev);
    prev = w;
  }
}

TEST(MaskedMean, Examples) {
  LossMap ones{{1, 1, 1, 1}, {1, 1, 1, 1}};
  EXPECT_DOUBLE_EQ(masked_mean(ones), 1.0);
  EXPECT_DOUBLE_EQ(masked_mean(ones, std::vector<double>(4, 0.25)), 1.0);
  LossMap two{{3, 7}, {1, 1}};
  EXPECT_DOUBLE_EQ(masked_mean(two, std::vector<double>{1, 0}), 3.0);
  LossMap pair{{1.2, 0.6}, {1, 1}};
  EXPECT_NEAR(masked_mean(pair, std::vector<double>{3.0 / 7, 4.0 / 7}), 0.85714, 1e-5);
  // The four-digit weights themselves land 2e-5 higher.
  EXPECT_NEAR(masked_mean(pair, std::vector<double>{0.4286, 0.5714}), 0.85716, 1e-12);
}

TEST(MaskedMean, ErrorPaths) {
  LossMap none{{0, 0}, {0, 0}};
  EXPECT_THROW(masked_mean(none), std::invalid_argument);
  EXPECT_THROW(masked_mean(none, std::vector<double>{0, 0}), std::invalid_argument);
  LossMap one{{2, 0}, {1, 0}};
  EXPECT_THROW(masked_mean(one, std::vector<double>{1}), std::invalid_argument);
  EXPECT_THROW(masked_mean(one, std::vector<double>{0.5, 0.5}), std::invalid_argument);
  EXPECT_DOUBLE_EQ(masked_mean(one), 2.0);
}

TEST(LossGradients, MatchFiniteDifferencesOnRandomPixels) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0, 1.5);
  std::uniform_int_distribution<int> pick(0, 4);
  for (const LossSpec spec : {LossSpec{LossKind::kCrossEntropy, 0.1}, LossSpec{LossKind::kGce, 0.1},
                              LossSpec{LossKind::kGce, 0.7}, LossSpec{LossKind::kKl, 0.1}}) {
    for (int t = 0; t < 100; ++t) {
      std::vector<double> z(5);
      for (auto& v : z) v = n(rng);
      double log_s = 0.5 * n(rng);
      const int gt = pick(rng);
      const double scale = 0.3 + std::abs(n(rng));

      const auto p = oracle::softmax(z);
      std::vector<double> dz(5);
      double dlog_s = 0;
      pixel_loss_grad(spec, p, gt, log_s, scale, dz, &dlog_s);

      // Oracle: -ln softmax, (1 - p^q)/q and ce/s + log(s)/2 written out directly.
      auto f = [&] {
        const double pg = oracle::softmax(z)[static_cast<std::size_t>(gt)];
        switch (spec.kind) {
          case LossKind::kCrossEntropy: return scale * -std::log(pg);
          case LossKind::kGce: return scale * (1 - std::pow(pg, spec.gce_q)) / spec.gce_q;
          case LossKind::kKl: return scale * (-std::log(pg) * std::exp(-log_s) + 0.5 * log_s);
        }
        return 0.0;
      };
      EXPECT_LT(oracle::rel_error(dz, oracle::gradient(z, f)), 1e-6) << to_string(spec.kind);
      if (spec.kind == LossKind::kKl) {
        std::vector<double> ls{log_s};
        auto g = [&] {
          log_s = ls[0];
          return f();
        };
        const auto fd = oracle::gradient(ls, g);
        log_s = ls[0];
        EXPECT_LT(oracle::rel_error({dlog_s}, fd), 1e-6);
      }
    }
  }
}

TEST(LossKinds, ParseRoundTrip) {
  for (auto k : {LossKind::kCrossEntropy, LossKind::kGce, LossKind::kKl}) EXPECT_EQ(parse_loss(to_string(k)), k);
  EXPECT_THROW(parse_loss("mse"), std::invalid_argument);
}
