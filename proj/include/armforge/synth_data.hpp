#pragma once

// Synthetic segmentation scenes: a Voronoi partition with one class per cell,
// features drawn around per-class prototypes, and a "coarse" copy of the
// labels corrupted near region boundaries the way polygon annotations are.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "armforge/field.hpp"
#include "armforge/toy_model.hpp"

namespace armforge {

/// SplitMix64 finalizer; used to derive independent per-scene seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// FNV-1a over bytes.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

enum class NoiseMode { kErodeToIgnore, kDilateMislabel, kPolygonSimplify };

inline std::string_view to_string(NoiseMode m) {
  switch (m) {
    case NoiseMode::kErodeToIgnore: return "erode_to_ignore";
    case NoiseMode::kDilateMislabel: return "dilate_mislabel";
    case NoiseMode::kPolygonSimplify: return "polygon_simplify";
  }
  return "?";
}

inline NoiseMode parse_noise_mode(std::string_view s) {
  if (s == "erode_to_ignore") return NoiseMode::kErodeToIgnore;
  if (s == "dilate_mislabel") return NoiseMode::kDilateMislabel;
  if (s == "polygon_simplify") return NoiseMode::kPolygonSimplify;
  throw std::invalid_argument("unknown noise mode '" + std::string(s) +
                              "' (expected erode_to_ignore|dilate_mislabel|polygon_simplify)");
}

struct NoiseSpec {
  NoiseMode mode = NoiseMode::kDilateMislabel;
  int radius = 2;
  /// Target dataset mislabel fraction; negative disables the check.
  double target_fraction = -1.0;
  double tolerance = 0.02;
  /// Probability that a region receives an intrusion (dilate_mislabel only).
  double intrusion_probability = 1.0;
};

struct Site {
  int y = 0;
  int x = 0;
};

struct SceneSample {
  std::uint64_t seed = 0;
  FeatureMap features;
  LabelMap fine;
  LabelMap coarse;
  std::vector<Site> sites;
  std::vector<int> site_classes;
  double mislabel_fraction = 0.0;  ///< coarse != fine and coarse != IGNORE
  double ignore_fraction = 0.0;

  void update_noise_stats() {
    std::size_t wrong = 0, ign = 0;
    for (std::size_t i = 0; i < fine.pixels(); ++i) {
      if (coarse.labels[i] == kIgnore)
        ++ign;
      else if (coarse.labels[i] != fine.labels[i])
        ++wrong;
    }
    const auto n = static_cast<double>(fine.pixels());
    mislabel_fraction = static_cast<double>(wrong) / n;
    ignore_fraction = static_cast<double>(ign) / n;
  }
};

/// Class prototypes: random directions in R^D scaled to length `scale`.
inline std::vector<std::vector<double>> make_prototypes(int classes, int dim, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x70726f746fu));
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(classes), std::vector<double>(dim));
  for (auto& p : out) {
    double norm = 0.0;
    for (double& v : p) {
      v = n01(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : p) v *= scale / norm;
  }
  return out;
}

/// Labels each pixel with the class of its nearest site (ties to the lower
/// site index) and draws features prototype + N(0, sigma^2 I).
inline SceneSample generate_scene_from_sites(std::span<const Site> sites, std::span<const int> site_classes,
                                             int height, int width,
                                             const std::vector<std::vector<double>>& prototypes, double sigma,
                                             std::uint64_t seed) {
  if (height < 1 || width < 1) throw std::invalid_argument("generate_scene: degenerate image size");
  if (sites.empty() || sites.size() != site_classes.size())
    throw std::invalid_argument("generate_scene: need one class per site");
  const int classes = static_cast<int>(prototypes.size());
  const int dim = prototypes.empty() ? 0 : static_cast<int>(prototypes.front().size());
  SceneSample s;
  s.seed = seed;
  s.sites.assign(sites.begin(), sites.end());
  s.site_classes.assign(site_classes.begin(), site_classes.end());
  s.fine = LabelMap(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      std::size_t best = 0;
      long best_d = -1;
      for (std::size_t k = 0; k < sites.size(); ++k) {
        const long dy = y - sites[k].y, dx = x - sites[k].x;
        const long d = dy * dy + dx * dx;
        if (best_d < 0 || d < best_d) {
          best_d = d;
          best = k;
        }
      }
      const int c = site_classes[best];
      if (c < 0 || c >= classes) throw std::invalid_argument("generate_scene: site class out of range");
      s.fine.at(y, x) = c;
    }
  s.features.image_height = height;
  s.features.values = Grid<double>(height, width, dim);
  std::mt19937_64 rng(mix_seed(seed, 0x66656174u));
  std::normal_distribution<double> n01(0.0, 1.0);
  for (std::size_t i = 0; i < s.fine.pixels(); ++i) {
    const auto& proto = prototypes[static_cast<std::size_t>(s.fine.labels[i])];
    auto row = s.features.values.row(i);
    for (int d = 0; d < dim; ++d) row[d] = proto[d] + (sigma > 0.0 ? sigma * n01(rng) : 0.0);
  }
  s.coarse = s.fine;
  return s;
}

/// Random Voronoi scene with `regions` sites. Sites keep a minimum spacing of
/// half the mean cell diameter; the first C sites take a permutation of all
/// classes so every class is present.
inline SceneSample generate_scene(std::uint64_t seed, int height, int width, int regions,
                                  const std::vector<std::vector<double>>& prototypes, double sigma) {
  const int classes = static_cast<int>(prototypes.size());
  if (height < 2 || width < 2) throw std::invalid_argument("generate_scene: degenerate image size");
  if (classes < 2) throw std::invalid_argument("generate_scene: need at least 2 classes");
  if (regions < classes)
    throw std::invalid_argument("generate_scene: regions (" + std::to_string(regions) + ") must be >= classes (" +
                                std::to_string(classes) + ")");
  if (regions > height * width) throw std::invalid_argument("generate_scene: more regions than pixels");
  std::mt19937_64 rng(mix_seed(seed, 0x73697465u));
  std::uniform_int_distribution<int> uy(0, height - 1), ux(0, width - 1), uc(0, classes - 1);
  const double min_sep = 0.5 * std::sqrt(static_cast<double>(height) * width / regions);
  std::vector<Site> sites;
  for (int k = 0; k < regions; ++k) {
    Site cand{};
    for (int attempt = 0; attempt < 10000; ++attempt) {
      cand = {uy(rng), ux(rng)};
      bool ok = true;
      for (const Site& s : sites) {
        const double dy = cand.y - s.y, dx = cand.x - s.x;
        if (std::sqrt(dy * dy + dx * dx) < min_sep || (dy == 0 && dx == 0)) {
          ok = false;
          break;
        }
      }
      if (ok) break;
    }
    sites.push_back(cand);
  }
  std::vector<int> cls(static_cast<std::size_t>(regions));
  std::vector<int> perm(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) perm[static_cast<std::size_t>(c)] = c;
  std::shuffle(perm.begin(), perm.end(), rng);
  for (int k = 0; k < regions; ++k) cls[static_cast<std::size_t>(k)] = k < classes ? perm[static_cast<std::size_t>(k)] : uc(rng);
  return generate_scene_from_sites(sites, cls, height, width, prototypes, sigma, seed);
}

namespace detail {

/// 8-connected components of equal label; returns component id per pixel.
inline std::vector<int> label_components(const LabelMap& m, int& count) {
  std::vector<int> comp(m.pixels(), -1);
  count = 0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < m.pixels(); ++start) {
    if (comp[start] >= 0) continue;
    const int lab = m.labels[start];
    comp[start] = count;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const int y = static_cast<int>(i / m.width), x = static_cast<int>(i % m.width);
      const int ny[8] = {y - 1, y + 1, y, y, y - 1, y - 1, y + 1, y + 1};
      const int nx[8] = {x, x, x - 1, x + 1, x - 1, x + 1, x - 1, x + 1};
      for (int k = 0; k < 8; ++k) {
        if (ny[k] < 0 || ny[k] >= m.height || nx[k] < 0 || nx[k] >= m.width) continue;
        const std::size_t j = static_cast<std::size_t>(ny[k]) * m.width + nx[k];
        if (comp[j] < 0 && m.labels[j] == lab) {
          comp[j] = count;
          stack.push_back(j);
        }
      }
    }
    ++count;
  }
  return comp;
}

/// Classes other than the pixel's own within Chebyshev distance r, as a bitmask.
inline std::uint64_t foreign_classes_within(const LabelMap& m, int y, int x, int r) {
  std::uint64_t mask = 0;
  const int own = m.at(y, x);
  for (int yy = std::max(0, y - r); yy <= std::min(m.height - 1, y + r); ++yy)
    for (int xx = std::max(0, x - r); xx <= std::min(m.width - 1, x + r); ++xx) {
      const int c = m.at(yy, xx);
      if (c != own && c != kIgnore) mask |= (std::uint64_t{1} << c);
    }
  return mask;
}

}  // namespace detail

/// Chebyshev distance from each pixel to the nearest pixel of another class,
/// capped at `cap` (pixels with no foreign class within `cap` get cap + 1).
inline std::vector<int> boundary_distance(const LabelMap& m, int cap) {
  std::vector<int> out(m.pixels(), cap + 1);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      for (int r = 1; r <= cap; ++r)
        if (detail::foreign_classes_within(m, y, x, r)) {
          out[static_cast<std::size_t>(y) * m.width + x] = r;
          break;
        }
  return out;
}

/// Produces a coarse annotation from fine labels. Only pixels within
/// Chebyshev distance `radius` of a class boundary can change.
inline LabelMap corrupt_to_coarse(const LabelMap& fine, const NoiseSpec& spec, std::uint64_t seed) {
  if (spec.radius < 0) throw std::invalid_argument("corrupt_to_coarse: radius must be >= 0");
  fine.validate(64);
  LabelMap coarse = fine;
  const int r = spec.radius;
  if (r == 0) return coarse;

  int ncomp = 0;
  const auto comp = detail::label_components(fine, ncomp);
  std::vector<std::uint64_t> near(fine.pixels(), 0);
  for (int y = 0; y < fine.height; ++y)
    for (int x = 0; x < fine.width; ++x)
      near[static_cast<std::size_t>(y) * fine.width + x] = detail::foreign_classes_within(fine, y, x, r);

  // Every region must keep an uncorrupted interior.
  std::vector<std::size_t> interior(static_cast<std::size_t>(ncomp), 0), size(static_cast<std::size_t>(ncomp), 0);
  std::vector<std::size_t> first_pixel(static_cast<std::size_t>(ncomp), 0);
  for (std::size_t i = 0; i < fine.pixels(); ++i) {
    const auto c = static_cast<std::size_t>(comp[i]);
    if (size[c]++ == 0) first_pixel[c] = i;
    if (near[i] == 0) ++interior[c];
  }
  for (std::size_t c = 0; c < static_cast<std::size_t>(ncomp); ++c)
    if (interior[c] == 0)
      throw std::invalid_argument(
          "corrupt_to_coarse: radius " + std::to_string(r) + " leaves no interior in region " + std::to_string(c) +
          " (class " + std::to_string(fine.labels[first_pixel[c]]) + ", " + std::to_string(size[c]) +
          " pixels, first at y=" + std::to_string(first_pixel[c] / fine.width) +
          " x=" + std::to_string(first_pixel[c] % fine.width) + ")");

  switch (spec.mode) {
    case NoiseMode::kErodeToIgnore:
      for (std::size_t i = 0; i < fine.pixels(); ++i)
        if (near[i]) coarse.labels[i] = kIgnore;
      break;
    case NoiseMode::kDilateMislabel: {
      // Each region picks one neighbouring class, which grows into it by r.
      std::vector<std::uint64_t> neighbours(static_cast<std::size_t>(ncomp), 0);
      for (std::size_t i = 0; i < fine.pixels(); ++i) neighbours[static_cast<std::size_t>(comp[i])] |= near[i];
      std::mt19937_64 rng(mix_seed(seed, 0x64696c61u));
      std::uniform_real_distribution<double> u01(0.0, 1.0);
      std::vector<int> chosen(static_cast<std::size_t>(ncomp), -1);
      for (std::size_t c = 0; c < static_cast<std::size_t>(ncomp); ++c) {
        std::vector<int> opts;
        for (int k = 0; k < 64; ++k)
          if (neighbours[c] >> k & 1u) opts.push_back(k);
        const bool intrude = u01(rng) < spec.intrusion_probability;
        if (opts.empty()) continue;
        std::uniform_int_distribution<std::size_t> pick(0, opts.size() - 1);
        const int k = opts[pick(rng)];
        if (intrude) chosen[c] = k;
      }
      for (std::size_t i = 0; i < fine.pixels(); ++i) {
        const int k = chosen[static_cast<std::size_t>(comp[i])];
        if (k >= 0 && (near[i] >> k & 1u)) coarse.labels[i] = k;
      }
      break;
    }
    case NoiseMode::kPolygonSimplify: {
      // The band of each region goes to the neighbouring class that occupies
      // most of that band's neighbourhood.
      std::vector<std::map<int, std::size_t>> votes(static_cast<std::size_t>(ncomp));
      for (std::size_t i = 0; i < fine.pixels(); ++i)
        for (int k = 0; k < 64; ++k)
          if (near[i] >> k & 1u) ++votes[static_cast<std::size_t>(comp[i])][k];
      std::vector<int> dominant(static_cast<std::size_t>(ncomp), -1);
      for (std::size_t c = 0; c < static_cast<std::size_t>(ncomp); ++c) {
        std::size_t best = 0;
        for (const auto& [k, n] : votes[c])
          if (n > best) {
            best = n;
            dominant[c] = k;
          }
      }
      for (std::size_t i = 0; i < fine.pixels(); ++i) {
        const int k = dominant[static_cast<std::size_t>(comp[i])];
        if (near[i] && k >= 0) coarse.labels[i] = k;
      }
      break;
    }
  }
  return coarse;
}

// ---------------------------------------------------------------------------
// Datasets.

struct DatasetConfig {
  int train_scenes = 200;
  int val_scenes = 50;
  int height = 64;
  int width = 64;
  int classes = 5;
  int dim = 8;
  int regions = 16;
  double sigma = 1.0;
  double prototype_scale = 1.5;
  NoiseSpec noise;
  std::uint64_t seed = 1;

  /// Canonical text of every generation parameter.
  std::string canonical() const {
    std::string s;
    auto kv = [&](const char* k, const std::string& v) { s += std::string(k) + "=" + v + "\n"; };
    auto num = [](double v) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    kv("train_scenes", std::to_string(train_scenes));
    kv("val_scenes", std::to_string(val_scenes));
    kv("height", std::to_string(height));
    kv("width", std::to_string(width));
    kv("classes", std::to_string(classes));
    kv("dim", std::to_string(dim));
    kv("regions", std::to_string(regions));
    kv("sigma", num(sigma));
    kv("prototype_scale", num(prototype_scale));
    kv("noise_mode", std::string(to_string(noise.mode)));
    kv("noise_radius", std::to_string(noise.radius));
    kv("noise_target", num(noise.target_fraction));
    kv("noise_tolerance", num(noise.tolerance));
    kv("noise_intrusion_probability", num(noise.intrusion_probability));
    kv("seed", std::to_string(seed));
    return s;
  }

  std::uint64_t fingerprint() const { return fnv1a(canonical()); }
};

struct Dataset {
  DatasetConfig config;
  std::vector<std::vector<double>> prototypes;
  std::vector<SceneSample> train;
  std::vector<SceneSample> val;  ///< evaluated against fine labels only
  double train_mislabel_fraction = 0.0;
  double train_ignore_fraction = 0.0;
  double intrusion_probability = 1.0;  ///< value actually used after calibration
};

inline std::uint64_t scene_seed(std::uint64_t master, int index) {
  return mix_seed(master, static_cast<std::uint64_t>(index));
}

namespace detail {

inline void corrupt_all(std::vector<SceneSample>& scenes, const NoiseSpec& spec, std::uint64_t attempt) {
  for (auto& s : scenes) {
    s.coarse = corrupt_to_coarse(s.fine, spec, mix_seed(s.seed, attempt));
    s.update_noise_stats();
  }
}

inline double mean_mislabel(const std::vector<SceneSample>& scenes) {
  double acc = 0.0;
  for (const auto& s : scenes) acc += s.mislabel_fraction;
  return scenes.empty() ? 0.0 : acc / static_cast<double>(scenes.size());
}

}  // namespace detail

/// Generates the train/val split. Validation coarse labels equal fine labels.
/// With a target mislabel fraction, dilate_mislabel calibrates its intrusion
/// probability by bisection and the corruption is re-sampled until the
/// achieved fraction lands within tolerance.
inline Dataset build_dataset(const DatasetConfig& cfg) {
  if (cfg.train_scenes < 1 || cfg.val_scenes < 0) throw std::invalid_argument("dataset: scene counts must be positive");
  Dataset ds;
  ds.config = cfg;
  ds.prototypes = make_prototypes(cfg.classes, cfg.dim, cfg.prototype_scale, cfg.seed);
  for (int i = 0; i < cfg.train_scenes + cfg.val_scenes; ++i) {
    auto s = generate_scene(scene_seed(cfg.seed, i), cfg.height, cfg.width, cfg.regions, ds.prototypes, cfg.sigma);
    (i < cfg.train_scenes ? ds.train : ds.val).push_back(std::move(s));
  }
  NoiseSpec spec = cfg.noise;
  const bool targeted = spec.target_fraction >= 0.0 && spec.radius > 0;
  if (targeted && spec.mode == NoiseMode::kDilateMislabel) {
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 20; ++it) {
      spec.intrusion_probability = 0.5 * (lo + hi);
      detail::corrupt_all(ds.train, spec, 0);
      (detail::mean_mislabel(ds.train) < spec.target_fraction ? lo : hi) = spec.intrusion_probability;
    }
    spec.intrusion_probability = 0.5 * (lo + hi);
  }
  bool met = false;
  for (std::uint64_t attempt = 0; attempt < 50 && !met; ++attempt) {
    detail::corrupt_all(ds.train, spec, attempt);
    met = !targeted || std::abs(detail::mean_mislabel(ds.train) - spec.target_fraction) <= spec.tolerance;
  }
  if (!met)
    throw std::runtime_error("dataset: mislabel fraction " + std::to_string(detail::mean_mislabel(ds.train)) +
                             " misses target " + std::to_string(spec.target_fraction) + " +/- " +
                             std::to_string(spec.tolerance));
  ds.intrusion_probability = spec.intrusion_probability;
  double ign = 0.0;
  for (const auto& s : ds.train) ign += s.ignore_fraction;
  ds.train_mislabel_fraction = detail::mean_mislabel(ds.train);
  ds.train_ignore_fraction = ign / static_cast<double>(ds.train.size());
  return ds;
}

}  // namespace armforge
