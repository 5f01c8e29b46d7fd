#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "armforge/field.hpp"
#include "armforge/likelihood_stats.hpp"
#include "armforge/losses.hpp"

namespace armforge {

/// Rows are ground truth, columns predictions. IGNORE pixels are not counted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes) : classes_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {
    if (classes < 1) throw std::invalid_argument("ConfusionMatrix: classes must be >= 1");
  }

  int classes() const { return classes_; }
  std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * classes_ + pred]; }
  std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

  void accumulate(const LabelMap& pred, const LabelMap& gt) {
    if (pred.pixels() != gt.pixels() || pred.width != gt.width)
      throw std::invalid_argument("ConfusionMatrix: prediction and ground truth shapes differ");
    for (std::size_t i = 0; i < gt.pixels(); ++i) {
      const int g = gt.labels[i];
      if (g == kIgnore) continue;
      const int p = pred.labels[i];
      if (g < 0 || g >= classes_ || p < 0 || p >= classes_)
        throw std::invalid_argument("ConfusionMatrix: class id out of range at pixel " + std::to_string(i));
      ++counts_[static_cast<std::size_t>(g) * classes_ + p];
    }
  }

  /// Sums another matrix into this one (shards merge exactly).
  void merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw std::invalid_argument("ConfusionMatrix: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  void reset() { std::fill(counts_.begin(), counts_.end(), 0); }

 private:
  int classes_;
  std::vector<std::uint64_t> counts_;
};

struct SegmentationScores {
  double aacc = 0.0;
  double macc = 0.0;
  double miou = 0.0;
  std::vector<double> class_acc;  ///< NaN for classes excluded from the means
  std::vector<double> class_iou;
};

/// aAcc = trace/total; mAcc and mIoU average over classes present in the
/// ground truth or the prediction.
inline SegmentationScores scores(const ConfusionMatrix& cm) {
  const int c = cm.classes();
  const auto total = cm.total();
  if (total == 0) throw std::invalid_argument("scores: empty confusion matrix");
  SegmentationScores s;
  s.class_acc.assign(static_cast<std::size_t>(c), std::numeric_limits<double>::quiet_NaN());
  s.class_iou.assign(static_cast<std::size_t>(c), std::numeric_limits<double>::quiet_NaN());
  std::uint64_t trace = 0;
  double acc_sum = 0.0, iou_sum = 0.0;
  int acc_n = 0, iou_n = 0;
  for (int k = 0; k < c; ++k) {
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < c; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const auto diag = cm.at(k, k);
    trace += diag;
    if (row + col == 0) continue;
    const double iou = static_cast<double>(diag) / static_cast<double>(row + col - diag);
    s.class_iou[static_cast<std::size_t>(k)] = iou;
    iou_sum += iou;
    ++iou_n;
    // A class that is only predicted has accuracy 0 over an empty row; it is
    // left out of mAcc.
    if (row > 0) {
      const double acc = static_cast<double>(diag) / static_cast<double>(row);
      s.class_acc[static_cast<std::size_t>(k)] = acc;
      acc_sum += acc;
      ++acc_n;
    }
  }
  s.aacc = static_cast<double>(trace) / static_cast<double>(total);
  s.macc = acc_n ? acc_sum / acc_n : 0.0;
  s.miou = iou_n ? iou_sum / iou_n : 0.0;
  return s;
}

/// Mean loss per equal-width bin of normalized confidence over [-1, 1].
struct VarianceHistogram {
  int bins = 20;
  std::vector<std::uint64_t> count;
  std::vector<double> mean_loss;  ///< NaN marks an empty bin

  double center(int b) const { return -1.0 + (b + 0.5) * 2.0 / bins; }
  bool empty(int b) const { return count[static_cast<std::size_t>(b)] == 0; }

  static int bin_of(double v, int bins) {
    const int b = static_cast<int>(std::floor((v + 1.0) * 0.5 * bins));
    return std::clamp(b, 0, bins - 1);
  }
};

inline VarianceHistogram loss_variance_histogram(const ConfidenceMap& v, const LossMap& l, int bins = 20) {
  if (bins < 2) throw std::invalid_argument("loss_variance_histogram: need at least 2 bins");
  if (v.pixels() != l.pixels()) throw std::invalid_argument("loss_variance_histogram: size mismatch");
  VarianceHistogram h;
  h.bins = bins;
  h.count.assign(static_cast<std::size_t>(bins), 0);
  std::vector<double> sum(static_cast<std::size_t>(bins), 0.0);
  for (std::size_t i = 0; i < l.pixels(); ++i) {
    if (!l.valid[i]) continue;
    const auto b = static_cast<std::size_t>(VarianceHistogram::bin_of(v.values[i], bins));
    ++h.count[b];
    sum[b] += l.loss[i];
  }
  h.mean_loss.assign(static_cast<std::size_t>(bins), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t b = 0; b < sum.size(); ++b)
    if (h.count[b]) h.mean_loss[b] = sum[b] / static_cast<double>(h.count[b]);
  return h;
}

/// Adds another histogram's pixels (same bin count) into `into`.
inline void merge_histogram(VarianceHistogram& into, const VarianceHistogram& other) {
  if (into.count.empty()) {
    into = other;
    return;
  }
  if (into.bins != other.bins) throw std::invalid_argument("merge_histogram: bin count mismatch");
  for (std::size_t b = 0; b < into.count.size(); ++b) {
    const auto n = into.count[b] + other.count[b];
    if (n == 0) continue;
    const double a = into.count[b] ? into.mean_loss[b] * static_cast<double>(into.count[b]) : 0.0;
    const double o = other.count[b] ? other.mean_loss[b] * static_cast<double>(other.count[b]) : 0.0;
    into.mean_loss[b] = (a + o) / static_cast<double>(n);
    into.count[b] = n;
  }
}

namespace detail {

inline std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> r(xs.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace detail

/// Spearman rank correlation (Pearson on average ranks).
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal series of length >= 2");
  const auto ra = detail::average_ranks(a), rb = detail::average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return (saa > 0 && sbb > 0) ? sab / std::sqrt(saa * sbb) : 0.0;
}

/// Spearman correlation between bin index and bin mean over non-empty bins.
inline double histogram_trend(const VarianceHistogram& h) {
  std::vector<double> idx, mean;
  for (int b = 0; b < h.bins; ++b) {
    if (h.empty(b)) continue;
    idx.push_back(b);
    mean.push_back(h.mean_loss[static_cast<std::size_t>(b)]);
  }
  return spearman(idx, mean);
}

inline void write_scores_csv(std::ostream& os, const SegmentationScores& s) {
  os << "aAcc,mAcc,mIoU\n" << s.aacc << "," << s.macc << "," << s.miou << "\n";
}

/// (bin_center, count, mean_loss) triples; empty bins print "nan".
inline void write_histogram_csv(std::ostream& os, const VarianceHistogram& h) {
  os << "bin_center,count,mean_loss\n";
  for (int b = 0; b < h.bins; ++b) {
    os << h.center(b) << "," << h.count[static_cast<std::size_t>(b)] << ",";
    if (h.empty(b))
      os << "nan";
    else
      os << h.mean_loss[static_cast<std::size_t>(b)];
    os << "\n";
  }
}

}  // namespace armforge
