#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "armforge/likelihood_stats.hpp"
#include "oracles.hpp"

using namespace armforge;

namespace {

ScoreMap scores_of(const std::vector<std::vector<double>>& rows) {
  const int c = static_cast<int>(rows.front().size());
  ScoreMap s(1, static_cast<int>(rows.size()), c);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int k = 0; k < c; ++k) s.values.at(i, k) = rows[i][static_cast<std::size_t>(k)];
  return s;
}

LikelihoodMap probs_of(const std::vector<std::vector<double>>& rows) {
  const int c = static_cast<int>(rows.front().size());
  LikelihoodMap p{Grid<double>(1, static_cast<int>(rows.size()), c)};
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int k = 0; k < c; ++k) p.values.at(i, k) = rows[i][static_cast<std::size_t>(k)];
  return p;
}

}  // namespace

TEST(Softmax, SymmetricScoresGiveUniform) {
  auto p = softmax(scores_of({{0.0, 0.0}}));
  EXPECT_DOUBLE_EQ(p.values.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(p.values.at(0, 1), 0.5);
  for (double t : {-50.0, 0.0, 3.5, 700.0}) {
    auto q = softmax(scores_of({{t, t, t}}));
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(q.values.at(0, k), 1.0 / 3.0, 1e-15);
  }
}

TEST(Softmax, LogThreeVersusZero) {
  auto p = softmax(scores_of({{std::log(3.0), 0.0}}));
  EXPECT_NEAR(p.values.at(0, 0), 0.75, 1e-15);
  EXPECT_NEAR(p.values.at(0, 1), 0.25, 1e-15);
}

TEST(Softmax, RejectsNonFiniteAndSingleClass) {
  EXPECT_THROW(softmax(scores_of({{0.0, std::numeric_limits<double>::quiet_NaN()}})), std::invalid_argument);
  EXPECT_THROW(softmax(scores_of({{std::numeric_limits<double>::infinity(), 0.0}})), std::invalid_argument);
  EXPECT_THROW(softmax(scores_of({{1.0}})), std::invalid_argument);
}

TEST(Softmax, RowsSumToOneForLargeScores) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1e4, 1e4);
  std::vector<std::vector<double>> rows(200, std::vector<double>(7));
  for (auto& r : rows)
    for (auto& v : r) v = u(rng);
  auto p = softmax(scores_of(rows));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double s = 0;
    for (int k = 0; k < 7; ++k) {
      EXPECT_GE(p.values.at(i, k), 0.0);
      s += p.values.at(i, k);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Softmax, MatchesReferenceAndBackward) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 2);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> z(5);
    for (auto& v : z) v = n(rng);
    const auto ref = oracle::softmax(z);
    auto p = softmax(scores_of({z}));
    for (int k = 0; k < 5; ++k) EXPECT_NEAR(p.values.at(0, k), ref[static_cast<std::size_t>(k)], 1e-14);

    // d/dz of sum_k a_k p_k
    std::vector<double> a(5);
    for (auto& v : a) v = n(rng);
    std::vector<double> dz(5);
    softmax_backward(p.values.row(0), a, dz);
    auto f = [&] {
      const auto q = oracle::softmax(z);
      double s = 0;
      for (int k = 0; k < 5; ++k) s += a[static_cast<std::size_t>(k)] * q[static_cast<std::size_t>(k)];
      return s;
    };
    const auto fd = oracle::gradient(z, f);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(dz[k], fd[k], 1e-9);
  }
}

TEST(Variance, SpecExamples) {
  auto v = variance(probs_of({{0.5, 0.5}, {1.0, 0.0}}));
  EXPECT_DOUBLE_EQ(v.values[0], 0.0);
  EXPECT_DOUBLE_EQ(v.values[1], 0.25);
  auto w = variance(probs_of({{0.7, 0.1, 0.1, 0.1}}));
  EXPECT_NEAR(w.values[0], 0.0675, 1e-15);
  EXPECT_FALSE(w.normalized);
}

TEST(Variance, SumScalingIsCTimesLarger) {
  auto p = probs_of({{0.7, 0.1, 0.1, 0.1}});
  EXPECT_NEAR(variance(p, VarianceScaling::kSum).values[0], 4 * 0.0675, 1e-15);
}

TEST(Variance, RangeOnRandomSimplexAndExtremes) {
  std::mt19937_64 rng(5);
  for (int c : {2, 3, 5, 19}) {
    const double vmax = (c - 1.0) / (c * c);
    for (int t = 0; t < 2000; ++t) {
      const auto p = oracle::simplex(rng, c);
      const double v = row_variance(p);
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, vmax * (1 + 1e-12));
      // Strictly inside for non-degenerate rows.
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, vmax);
    }
    std::vector<double> onehot(static_cast<std::size_t>(c), 0.0), uni(static_cast<std::size_t>(c), 1.0 / c);
    onehot[0] = 1.0;
    EXPECT_NEAR(row_variance(onehot), vmax, 1e-15);
    EXPECT_NEAR(row_variance(uni), 0.0, 1e-15);
  }
}

TEST(Variance, PermutationInvariant) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 100; ++t) {
    auto p = oracle::simplex(rng, 6);
    const double v = row_variance(p);
    std::shuffle(p.begin(), p.end(), rng);
    EXPECT_NEAR(row_variance(p), v, 1e-16);
  }
}

TEST(NormalizeVariance, EndpointsAndExample) {
  for (int c : {2, 3, 4, 10}) {
    EXPECT_DOUBLE_EQ(normalize_variance_value(0.0, c), -1.0);
    EXPECT_NEAR(normalize_variance_value((c - 1.0) / (c * c), c), 1.0, 1e-15);
  }
  EXPECT_NEAR(normalize_variance_value(0.0675, 4), 32.0 / 3.0 * 0.0675 - 1.0, 1e-15);
  EXPECT_NEAR(normalize_variance_value(0.0675, 4), -0.28, 1e-12);
}

TEST(NormalizeVariance, RejectsOutOfRangeAndWrongKind) {
  EXPECT_THROW(normalize_variance_value(-0.01, 3), std::invalid_argument);
  EXPECT_THROW(normalize_variance_value(0.3, 2), std::invalid_argument);
  auto raw = variance(probs_of({{0.2, 0.8}}));
  auto n = normalize_variance(raw, 2);
  EXPECT_TRUE(n.normalized);
  EXPECT_THROW(normalize_variance(n, 2), std::invalid_argument);
}

TEST(NormalizeVariance, BijectionRoundTripAndMonotone) {
  std::mt19937_64 rng(7);
  for (int c : {2, 5, 12}) {
    const double vmax = (c - 1.0) / (c * c);
    std::uniform_real_distribution<double> u(0.0, vmax);
    double prev_v = -1, prev_n = -2;
    std::vector<double> vs(1000);
    for (auto& v : vs) v = u(rng);
    std::sort(vs.begin(), vs.end());
    for (double v : vs) {
      const double n = normalize_variance_value(v, c);
      EXPECT_GE(n, -1.0);
      EXPECT_LE(n, 1.0);
      EXPECT_LT(std::abs(denormalize_variance_value(n, c) - v), 1e-12);
      if (v > prev_v) {
        EXPECT_GE(n, prev_n);
      }
      prev_v = v;
      prev_n = n;
    }
  }
}

TEST(Indicators, RawExamples) {
  auto uni = probs_of({{0.25, 0.25, 0.25, 0.25}});
  auto hot = probs_of({{0.0, 1.0, 0.0, 0.0}});
  EXPECT_NEAR(entropy_indicator_raw(uni).values[0], std::log(4.0), 1e-10);
  EXPECT_NEAR(entropy_indicator_raw(hot).values[0], 0.0, 1e-10);
  EXPECT_NEAR(std_indicator_raw(probs_of({{1.0, 0.0}})).values[0], 0.5, 1e-15);
  EXPECT_NEAR(log_var_indicator_raw(probs_of({{1.0, 0.0}})).values[0], std::log(0.25 + 1e-12), 1e-12);
}

TEST(Indicators, NormalizedOrientationAndRange) {
  for (auto kind : {IndicatorKind::kVariance, IndicatorKind::kStd, IndicatorKind::kLogVariance, IndicatorKind::kEntropy}) {
    auto uni = confidence(probs_of({{1.0 / 3, 1.0 / 3, 1.0 / 3}}), kind);
    auto hot = confidence(probs_of({{0.0, 0.0, 1.0}}), kind);
    EXPECT_TRUE(uni.normalized);
    EXPECT_NEAR(uni.values[0], -1.0, 1e-9) << to_string(kind);
    EXPECT_NEAR(hot.values[0], 1.0, 1e-9) << to_string(kind);
  }
}

TEST(Indicators, MonotoneFromUniformTowardOneHot) {
  for (int c : {2, 4, 7}) {
    for (auto kind : {IndicatorKind::kVariance, IndicatorKind::kStd, IndicatorKind::kLogVariance, IndicatorKind::kEntropy}) {
      double prev = -std::numeric_limits<double>::infinity();
      for (int s = 0; s <= 50; ++s) {
        const double t = s / 50.0;
        std::vector<double> p(static_cast<std::size_t>(c), (1 - t) / c);
        p[1] += t;
        const double val = indicator_value(p, kind);
        if (s > 0) {
          EXPECT_GT(val, prev) << to_string(kind) << " C=" << c << " t=" << t;
        }
        prev = val;
      }
    }
  }
}

TEST(Indicators, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 100; ++t) {
    auto p = oracle::simplex(rng, 5);
    for (auto& v : p) v = 0.02 + 0.9 * v;  // away from the clamp region
    for (auto kind : {IndicatorKind::kVariance, IndicatorKind::kStd, IndicatorKind::kLogVariance, IndicatorKind::kEntropy}) {
      std::vector<double> g(5);
      indicator_gradient(p, kind, g);
      const auto fd = oracle::gradient(p, [&] { return indicator_value(p, kind); }, 1e-5);
      EXPECT_LT(oracle::rel_error(g, fd), 1e-6) << to_string(kind);
    }
  }
}

TEST(Indicators, ParseRoundTrip) {
  for (auto kind : {IndicatorKind::kVariance, IndicatorKind::kStd, IndicatorKind::kLogVariance, IndicatorKind::kEntropy})
    EXPECT_EQ(parse_indicator(to_string(kind)), kind);
  EXPECT_THROW(parse_indicator("variance"), std::invalid_argument);
}
