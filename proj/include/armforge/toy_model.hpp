#pragma once

// Small per-pixel segmentation network: D -> H -> H -> C (+1 log s channel),
// Swish activations, optional 3x3 first layer. Gradients are derived by hand.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <iomanip>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "armforge/arm.hpp"
#include "armforge/field.hpp"
#include "armforge/likelihood_stats.hpp"
#include "armforge/losses.hpp"

namespace armforge {

/// Per-pixel feature vectors (channels == feature dimension). Batches stack
/// images vertically; `image_height` marks the image boundaries.
struct FeatureMap {
  Grid<double> values;
  int image_height = 0;

  int dim() const { return values.channels; }
  std::size_t pixels() const { return values.pixels(); }
  int images() const { return image_height > 0 ? values.height / image_height : 0; }
};

inline FeatureMap stack_features(std::span<const FeatureMap* const> maps) {
  if (maps.empty()) throw std::invalid_argument("stack_features: empty batch");
  const auto& first = maps.front()->values;
  FeatureMap out;
  out.image_height = maps.front()->image_height;
  out.values.width = first.width;
  out.values.channels = first.channels;
  for (const FeatureMap* m : maps) {
    if (m->values.width != first.width || m->values.channels != first.channels ||
        m->image_height != out.image_height)
      throw std::invalid_argument("stack_features: images differ in shape");
    out.values.height += m->values.height;
    out.values.data.insert(out.values.data.end(), m->values.data.begin(), m->values.data.end());
  }
  return out;
}

struct ToyNetConfig {
  int in_dim = 8;
  int hidden = 16;
  int classes = 5;
  bool kl_head = false;  ///< extra output channel holding log s
  bool conv3x3 = false;  ///< first layer sees the 3x3 neighbourhood

  int outputs() const { return classes + (kl_head ? 1 : 0); }
  int first_fan_in() const { return in_dim * (conv3x3 ? 9 : 1); }
  std::size_t parameter_count() const {
    const std::size_t h = hidden, o = outputs(), f = first_fan_in();
    return h * f + h + h * h + h + o * h + o;
  }
  bool operator==(const ToyNetConfig&) const = default;
};

/// All weights live in one flat vector; the layer matrices are column-major
/// views into it, in the order W1 b1 W2 b2 W3 b3.
struct ToyNetParams {
  using Mat = Eigen::Map<Eigen::MatrixXd>;
  using CMat = Eigen::Map<const Eigen::MatrixXd>;
  using Vec = Eigen::Map<Eigen::VectorXd>;
  using CVec = Eigen::Map<const Eigen::VectorXd>;

  ToyNetConfig config;
  std::vector<double> flat;
  std::uint64_t version = 0;  ///< bumped on every update; forward caches record it

  ToyNetParams() = default;
  explicit ToyNetParams(const ToyNetConfig& c) : config(c), flat(c.parameter_count(), 0.0) {
    if (c.in_dim < 1 || c.hidden < 1 || c.classes < 2) throw std::invalid_argument("ToyNetConfig: bad widths");
  }

  /// Glorot-uniform weights, zero biases.
  static ToyNetParams initialized(const ToyNetConfig& c, std::uint64_t seed) {
    ToyNetParams p(c);
    std::mt19937_64 rng(seed);
    auto fill = [&](Mat m) {
      const double a = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
      std::uniform_real_distribution<double> u(-a, a);
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
    };
    fill(p.w1());
    fill(p.w2());
    fill(p.w3());
    return p;
  }

  std::size_t off_b1() const { return static_cast<std::size_t>(config.hidden) * config.first_fan_in(); }
  std::size_t off_w2() const { return off_b1() + config.hidden; }
  std::size_t off_b2() const { return off_w2() + static_cast<std::size_t>(config.hidden) * config.hidden; }
  std::size_t off_w3() const { return off_b2() + config.hidden; }
  std::size_t off_b3() const { return off_w3() + static_cast<std::size_t>(config.outputs()) * config.hidden; }

  Mat w1() { return {flat.data(), config.hidden, config.first_fan_in()}; }
  Vec b1() { return {flat.data() + off_b1(), config.hidden}; }
  Mat w2() { return {flat.data() + off_w2(), config.hidden, config.hidden}; }
  Vec b2() { return {flat.data() + off_b2(), config.hidden}; }
  Mat w3() { return {flat.data() + off_w3(), config.outputs(), config.hidden}; }
  Vec b3() { return {flat.data() + off_b3(), config.outputs()}; }
  CMat w1() const { return {flat.data(), config.hidden, config.first_fan_in()}; }
  CVec b1() const { return {flat.data() + off_b1(), config.hidden}; }
  CMat w2() const { return {flat.data() + off_w2(), config.hidden, config.hidden}; }
  CVec b2() const { return {flat.data() + off_b2(), config.hidden}; }
  CMat w3() const { return {flat.data() + off_w3(), config.outputs(), config.hidden}; }
  CVec b3() const { return {flat.data() + off_b3(), config.outputs()}; }

  bool finite() const { return all_finite(flat); }
};

/// Intermediates of one forward pass, consumed by backward.
struct ToyNetCache {
  std::uint64_t version = 0;
  std::size_t pixels = 0;
  Eigen::MatrixXd input;  ///< fan_in x N (im2col columns when conv3x3)
  Eigen::MatrixXd a1, h1, a2, h2;
  Eigen::MatrixXd scores;  ///< outputs x N
};

struct ToyNetOutput {
  ScoreMap scores;
  UncertaintyMap uncertainty;  ///< empty unless the KL head is enabled
};

namespace detail {

inline Eigen::MatrixXd swish_m(const Eigen::MatrixXd& a) {
  return a.unaryExpr([](double x) { return swish(x); });
}
inline Eigen::MatrixXd swish_grad_m(const Eigen::MatrixXd& a) {
  return a.unaryExpr([](double x) { return swish_grad(x); });
}

/// 3x3 neighbourhood columns with zero padding; ordering (dy, dx, channel).
inline Eigen::MatrixXd im2col3x3(const FeatureMap& x) {
  const int d = x.dim(), w = x.values.width, ih = x.image_height;
  const std::size_t n = x.pixels();
  Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(9 * d, static_cast<Eigen::Index>(n));
  for (int y = 0; y < x.values.height; ++y) {
    const int img_y = y % ih;
    const int base = y - img_y;
    for (int xx = 0; xx < w; ++xx) {
      const auto col = static_cast<Eigen::Index>(static_cast<std::size_t>(y) * w + xx);
      int slot = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx, ++slot) {
          const int sy = img_y + dy, sx = xx + dx;
          if (sy < 0 || sy >= ih || sx < 0 || sx >= w) continue;
          const auto src = x.values.row(static_cast<std::size_t>(base + sy) * w + sx);
          for (int c = 0; c < d; ++c) cols(slot * d + c, col) = src[c];
        }
    }
  }
  return cols;
}

}  // namespace detail

inline ToyNetOutput forward(const ToyNetParams& theta, const FeatureMap& x, ToyNetCache* cache = nullptr) {
  const auto& cfg = theta.config;
  if (x.dim() != cfg.in_dim)
    throw std::invalid_argument("toy model: feature dimension " + std::to_string(x.dim()) + " != " +
                                std::to_string(cfg.in_dim));
  if (x.image_height <= 0 || x.values.height % x.image_height != 0)
    throw std::invalid_argument("toy model: batch height is not a multiple of the image height");
  if (!all_finite(x.values.data)) throw std::invalid_argument("toy model: non-finite feature");
  const auto n = static_cast<Eigen::Index>(x.pixels());

  Eigen::MatrixXd input;
  if (cfg.conv3x3) {
    input = detail::im2col3x3(x);
  } else {
    input = Eigen::Map<const Eigen::MatrixXd>(x.values.data.data(), cfg.in_dim, n);
  }
  Eigen::MatrixXd a1 = theta.w1() * input;
  a1.colwise() += theta.b1();
  Eigen::MatrixXd h1 = detail::swish_m(a1);
  Eigen::MatrixXd a2 = theta.w2() * h1;
  a2.colwise() += theta.b2();
  Eigen::MatrixXd h2 = detail::swish_m(a2);
  Eigen::MatrixXd s = theta.w3() * h2;
  s.colwise() += theta.b3();

  ToyNetOutput out;
  out.scores = ScoreMap(x.values.height, x.values.width, cfg.classes);
  const int o = cfg.outputs();
  for (Eigen::Index j = 0; j < n; ++j) {
    for (int c = 0; c < cfg.classes; ++c) out.scores.values.at(static_cast<std::size_t>(j), c) = s(c, j);
  }
  if (cfg.kl_head) {
    out.uncertainty.log_s.resize(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < n; ++j) out.uncertainty.log_s[static_cast<std::size_t>(j)] = s(o - 1, j);
  }
  if (cache) {
    cache->version = theta.version;
    cache->pixels = static_cast<std::size_t>(n);
    cache->input = std::move(input);
    cache->a1 = std::move(a1);
    cache->h1 = std::move(h1);
    cache->a2 = std::move(a2);
    cache->h2 = std::move(h2);
    cache->scores = std::move(s);
  }
  return out;
}

/// Parameter gradients given dL/dscores (outputs x N, column per pixel; the
/// last row is d/d log s when the KL head is enabled).
inline std::vector<double> backward(const ToyNetParams& theta, const ToyNetCache& cache,
                                    const Eigen::MatrixXd& upstream) {
  if (cache.version != theta.version || cache.pixels == 0)
    throw std::logic_error("toy model: backward called with a stale or empty forward cache");
  const auto n = static_cast<Eigen::Index>(cache.pixels);
  if (upstream.rows() != theta.config.outputs() || upstream.cols() != n)
    throw std::invalid_argument("toy model: upstream gradient has the wrong shape");

  ToyNetParams g(theta.config);
  g.w3().noalias() = upstream * cache.h2.transpose();
  g.b3() = upstream.rowwise().sum();
  Eigen::MatrixXd d2 = (theta.w3().transpose() * upstream).cwiseProduct(detail::swish_grad_m(cache.a2));
  g.w2().noalias() = d2 * cache.h1.transpose();
  g.b2() = d2.rowwise().sum();
  Eigen::MatrixXd d1 = (theta.w2().transpose() * d2).cwiseProduct(detail::swish_grad_m(cache.a1));
  g.w1().noalias() = d1 * cache.input.transpose();
  g.b1() = d1.rowwise().sum();
  return std::move(g.flat);
}

struct SgdState {
  std::vector<double> velocity;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  long skipped = 0;
};

/// Momentum SGD with L2 weight decay folded into the gradient:
/// v <- mu v + (g + wd theta); theta <- theta - lr v.
inline void sgd_step(ToyNetParams& theta, std::span<const double> grad, double lr, SgdState& state) {
  if (grad.size() != theta.flat.size()) throw std::invalid_argument("sgd_step: gradient size mismatch");
  if (!all_finite(grad)) {
    ++state.skipped;
    return;
  }
  if (state.velocity.size() != theta.flat.size()) state.velocity.assign(theta.flat.size(), 0.0);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double gi = grad[i] + state.weight_decay * theta.flat[i];
    state.velocity[i] = state.momentum * state.velocity[i] + gi;
    theta.flat[i] -= lr * state.velocity[i];
  }
  ++theta.version;
}

/// Argmax class per pixel.
inline LabelMap predict(const ScoreMap& s) {
  LabelMap out(s.values.height, s.values.width);
  for (std::size_t i = 0; i < s.pixels(); ++i) {
    auto row = s.values.row(i);
    int best = 0;
    for (int c = 1; c < s.classes(); ++c)
      if (row[c] > row[best]) best = c;
    out.labels[i] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "ARMT", u32 version, u32 in_dim, hidden, classes, kl_head,
// conv3x3, u32 count, count x f64 (little-endian).

inline constexpr char kToyMagic[4] = {'A', 'R', 'M', 'T'};
inline constexpr std::uint32_t kToyFormatVersion = 1;

inline void write_toy_binary(std::ostream& os, const ToyNetParams& p) {
  os.write(kToyMagic, 4);
  detail::write_le<std::uint32_t>(os, kToyFormatVersion);
  const auto& c = p.config;
  for (int v : {c.in_dim, c.hidden, c.classes, c.kl_head ? 1 : 0, c.conv3x3 ? 1 : 0})
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.flat.size()));
  for (double v : p.flat) detail::write_le(os, v);
}

inline ToyNetParams read_toy_binary(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kToyMagic, 4) != 0) throw std::runtime_error("model checkpoint: bad magic");
  if (detail::read_le<std::uint32_t>(is) != kToyFormatVersion)
    throw std::runtime_error("model checkpoint: unsupported version");
  ToyNetConfig c;
  c.in_dim = static_cast<int>(detail::read_le<std::uint32_t>(is));
  c.hidden = static_cast<int>(detail::read_le<std::uint32_t>(is));
  c.classes = static_cast<int>(detail::read_le<std::uint32_t>(is));
  c.kl_head = detail::read_le<std::uint32_t>(is) != 0;
  c.conv3x3 = detail::read_le<std::uint32_t>(is) != 0;
  ToyNetParams p(c);
  if (detail::read_le<std::uint32_t>(is) != p.flat.size())
    throw std::runtime_error("model checkpoint: parameter count does not match the stored widths");
  for (double& v : p.flat) v = detail::read_le<double>(is);
  return p;
}

inline void write_toy_summary(std::ostream& os, const ToyNetParams& p) {
  const auto& c = p.config;
  os << "toy model D=" << c.in_dim << " H=" << c.hidden << " C=" << c.classes << (c.kl_head ? " +log_s" : "")
     << (c.conv3x3 ? " conv3x3" : "") << " params=" << p.flat.size() << "\n"
     << std::setprecision(6);
  os << "  W1 " << p.w1().rows() << "x" << p.w1().cols() << " |W|=" << p.w1().norm() << " |b|=" << p.b1().norm()
     << "\n";
  os << "  W2 " << p.w2().rows() << "x" << p.w2().cols() << " |W|=" << p.w2().norm() << " |b|=" << p.b2().norm()
     << "\n";
  os << "  W3 " << p.w3().rows() << "x" << p.w3().cols() << " |W|=" << p.w3().norm() << " |b|=" << p.b3().norm()
     << "\n";
}

}  // namespace armforge
