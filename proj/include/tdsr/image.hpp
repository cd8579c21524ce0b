#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tdsr/errors.hpp"

namespace tdsr {

/// Row-major single-channel 2D array.
template <typename T>
struct Grid {
  int width = 0;
  int height = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(int w, int h, T fill = T{})
      : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {
    if (w < 0 || h < 0) throw ArgumentError("negative grid extent");
  }

  std::size_t size() const noexcept { return values.size(); }
  T& at(int x, int y) noexcept { return values[static_cast<std::size_t>(y) * width + x]; }
  const T& at(int x, int y) const noexcept {
    return values[static_cast<std::size_t>(y) * width + x];
  }
  bool same_extent(int w, int h) const noexcept { return width == w && height == h; }
  template <typename U>
  bool same_extent(const Grid<U>& o) const noexcept {
    return width == o.width && height == o.height;
  }
  bool operator==(const Grid&) const = default;
};

using BinaryMask = Grid<std::uint8_t>;

inline std::size_t count_positive(const BinaryMask& m) {
  return static_cast<std::size_t>(
      std::count_if(m.values.begin(), m.values.end(), [](auto v) { return v != 0; }));
}

/// Normalized depth map with per-pixel validity.
struct DepthImage {
  Grid<double> depth;
  BinaryMask valid;

  DepthImage() = default;
  DepthImage(int w, int h) : depth(w, h, 0.0), valid(w, h, 1) {}
  explicit DepthImage(Grid<double> d)
      : depth(std::move(d)), valid(depth.width, depth.height, 1) {}

  int width() const noexcept { return depth.width; }
  int height() const noexcept { return depth.height; }
};

/// Planar RGB image with values in [0, 1].
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<double> planes;  // 3 * width * height, channel-major

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), planes(3 * static_cast<std::size_t>(w) * h, 0.0) {}

  double& at(int c, int x, int y) noexcept {
    return planes[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double at(int c, int x, int y) const noexcept {
    return planes[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  Grid<double> grayscale() const {
    Grid<double> g(width, height);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        g.at(x, y) = 0.299 * at(0, x, y) + 0.587 * at(1, x, y) + 0.114 * at(2, x, y);
    return g;
  }
};

enum class Label { normal, anomalous };

inline const char* to_string(Label l) { return l == Label::normal ? "normal" : "anomalous"; }
inline Label label_from_string(const std::string& s) {
  if (s == "normal") return Label::normal;
  if (s == "anomalous") return Label::anomalous;
  throw ArgumentError("unknown label '" + s + "'");
}

/// Registered RGB + depth pair with optional masks.
struct RgbdSample {
  std::string id;
  RgbImage rgb;
  DepthImage depth;
  std::optional<BinaryMask> foreground;
  std::optional<BinaryMask> gt_mask;
  Label label = Label::normal;

  int width() const noexcept { return rgb.width; }
  int height() const noexcept { return rgb.height; }

  void validate() const {
    if (rgb.width != depth.width() || rgb.height != depth.height())
      throw ShapeError("sample " + id + ": rgb and depth extents differ");
    if (foreground && !foreground->same_extent(rgb.width, rgb.height))
      throw ShapeError("sample " + id + ": foreground extent mismatch");
    if (gt_mask && !gt_mask->same_extent(rgb.width, rgb.height))
      throw ShapeError("sample " + id + ": gt mask extent mismatch");
  }
};

}  // namespace tdsr
