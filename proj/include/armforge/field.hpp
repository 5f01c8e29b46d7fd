#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace armforge {

/// Label value for pixels excluded from loss, weight normalization and metrics.
inline constexpr int kIgnore = 255;

/// Dense per-pixel field with `channels` values per pixel, pixel-major.
///
/// A mini-batch of images is stored by stacking the images vertically, so a
/// batch of B images of H x W pixels has height B*H. Per-pixel operations do
/// not care about the stacking; spatial operations take the image height
/// explicitly.
template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int h, int w, int c, T fill = T{})
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, fill) {
    if (h < 0 || w < 0 || c < 0) throw std::invalid_argument("Grid: negative extent");
  }

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }

  T& at(std::size_t pixel, int ch) { return data[pixel * channels + ch]; }
  const T& at(std::size_t pixel, int ch) const { return data[pixel * channels + ch]; }

  std::span<T> row(std::size_t pixel) { return {data.data() + pixel * channels, static_cast<std::size_t>(channels)}; }
  std::span<const T> row(std::size_t pixel) const {
    return {data.data() + pixel * channels, static_cast<std::size_t>(channels)};
  }

  bool same_shape(const Grid& o) const { return height == o.height && width == o.width; }
};

/// Per-pixel integer class ids in [0, classes) or kIgnore.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> labels;

  LabelMap() = default;
  LabelMap(int h, int w, int fill = 0)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t pixels() const { return labels.size(); }
  int& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }

  void validate(int classes) const {
    if (labels.size() != static_cast<std::size_t>(height) * width)
      throw std::invalid_argument("LabelMap: storage does not match extent");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const int l = labels[i];
      if (l != kIgnore && (l < 0 || l >= classes))
        throw std::invalid_argument("LabelMap: pixel " + std::to_string(i) + " has class id " + std::to_string(l) +
                                    " outside [0, " + std::to_string(classes) + ")");
    }
  }
};

/// Stacks label maps vertically (same width required).
inline LabelMap stack_labels(std::span<const LabelMap* const> maps) {
  if (maps.empty()) return {};
  LabelMap out;
  out.width = maps.front()->width;
  for (const LabelMap* m : maps) {
    if (m->width != out.width) throw std::invalid_argument("stack_labels: width mismatch");
    out.height += m->height;
    out.labels.insert(out.labels.end(), m->labels.begin(), m->labels.end());
  }
  return out;
}

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace armforge
