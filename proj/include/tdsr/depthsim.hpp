#pragma once

// Procedural industrial depth simulation from lattice gradient noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "tdsr/errors.hpp"
#include "tdsr/image.hpp"
#include "tdsr/rng.hpp"

namespace tdsr::depthsim {

struct Gradient2 {
  double x = 0.0;
  double y = 0.0;
};

/// Unit gradients at the (lattice_y + 1) x (lattice_x + 1) lattice vertices,
/// row-major. Angles are uniform on [0, 2pi) from a stream seeded by `seed`.
inline std::vector<Gradient2> lattice_gradients(int lattice_x, int lattice_y,
                                                std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Gradient2> g(static_cast<std::size_t>(lattice_x + 1) * (lattice_y + 1));
  for (auto& v : g) {
    const double a = 2.0 * std::numbers::pi * rng.uniform();
    v = {std::cos(a), std::sin(a)};
  }
  return g;
}

/// Quintic interpolant 6t^5 - 15t^4 + 10t^3.
inline double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

/// Raw gradient noise at lattice coordinates (u, v), u in [0, lattice_x],
/// v in [0, lattice_y]. Zero at every integer lattice point.
inline double lattice_noise(const std::vector<Gradient2>& grads, int lattice_x,
                            int lattice_y, double u, double v) {
  int ix = std::min(static_cast<int>(std::floor(u)), lattice_x - 1);
  int iy = std::min(static_cast<int>(std::floor(v)), lattice_y - 1);
  ix = std::max(ix, 0);
  iy = std::max(iy, 0);
  const double fx = u - ix;
  const double fy = v - iy;
  const int stride = lattice_x + 1;
  auto dot = [&](int cx, int cy, double dx, double dy) {
    const Gradient2& gr = grads[static_cast<std::size_t>(cy) * stride + cx];
    return gr.x * dx + gr.y * dy;
  };
  const double n00 = dot(ix, iy, fx, fy);
  const double n10 = dot(ix + 1, iy, fx - 1.0, fy);
  const double n01 = dot(ix, iy + 1, fx, fy - 1.0);
  const double n11 = dot(ix + 1, iy + 1, fx - 1.0, fy - 1.0);
  const double sx = fade(fx);
  const double sy = fade(fy);
  const double top = n00 + sx * (n10 - n00);
  const double bottom = n01 + sx * (n11 - n01);
  return top + sy * (bottom - top);
}

/// Min-max normalized Perlin noise raster.
struct PerlinField {
  int width = 0;
  int height = 0;
  int lattice_x = 1;
  int lattice_y = 1;
  std::uint64_t seed = 0;
  Grid<double> values;
};

/// Unnormalized noise sampled at pixel centres.
inline Grid<double> raw_perlin(int width, int height, int lattice_x, int lattice_y,
                               std::uint64_t seed) {
  if (width < 2 || height < 2)
    throw ArgumentError("perlin: image must be at least 2x2, got " +
                        std::to_string(width) + "x" + std::to_string(height));
  if (lattice_x < 1 || lattice_y < 1 || lattice_x > width || lattice_y > height ||
      width % lattice_x != 0 || height % lattice_y != 0)
    throw ArgumentError("perlin: lattice " + std::to_string(lattice_x) + "x" +
                        std::to_string(lattice_y) + " does not tile " +
                        std::to_string(width) + "x" + std::to_string(height));
  const auto grads = lattice_gradients(lattice_x, lattice_y, seed);
  Grid<double> out(width, height);
  const double su = static_cast<double>(lattice_x) / width;
  const double sv = static_cast<double>(lattice_y) / height;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      out.at(x, y) = lattice_noise(grads, lattice_x, lattice_y, (x + 0.5) * su, (y + 0.5) * sv);
  return out;
}

/// Rescales to span exactly [0, 1].
inline void normalize_unit(Grid<double>& g) {
  const auto [lo_it, hi_it] = std::minmax_element(g.values.begin(), g.values.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (!(hi > lo)) throw DegenerateError("constant noise field");
  const double span = hi - lo;
  for (auto& v : g.values) v = (v - lo) / span;
}

inline PerlinField generate_perlin(int width, int height, int lattice_x, int lattice_y,
                                   std::uint64_t seed) {
  PerlinField f{width, height, lattice_x, lattice_y, seed,
                raw_perlin(width, height, lattice_x, lattice_y, seed)};
  normalize_unit(f.values);
  return f;
}

/// Lattice cell counts are drawn as 2^i, i uniform in [min_pow, max_pow],
/// independently per axis and clipped to the image extent.
struct LatticeRange {
  int min_pow = 1;
  int max_pow = 5;
};

inline int sample_lattice_count(Rng& rng, const LatticeRange& range, int extent) {
  if (range.min_pow < 0 || range.max_pow < range.min_pow)
    throw ArgumentError("lattice range [" + std::to_string(range.min_pow) + "," +
                        std::to_string(range.max_pow) + "] is empty");
  int count = 1 << rng.uniform_int(range.min_pow, range.max_pow);
  while (count > 1 && (count > extent || extent % count != 0)) count >>= 1;
  return count;
}

inline PerlinField sample_perlin(int width, int height, const LatticeRange& range, Rng& rng) {
  const int lx = sample_lattice_count(rng, range, width);
  const int ly = sample_lattice_count(rng, range, height);
  return generate_perlin(width, height, lx, ly, rng.next_u64());
}

// ---- affine depth model -----------------------------------------------------

struct DepthSimParams {
  double alpha = 1.0;  // scale
  double beta = 0.0;   // translation

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0))
      throw ArgumentError("depth sim: alpha must lie in (0,1], got " + std::to_string(alpha));
    if (!(beta >= 0.0))
      throw ArgumentError("depth sim: beta must be >= 0, got " + std::to_string(beta));
    if (alpha + beta > 1.0)
      throw ArgumentError("depth sim: alpha + beta exceeds 1 (" + std::to_string(alpha) +
                          " + " + std::to_string(beta) + ")");
  }
};

/// D = alpha * P + beta over a normalized field.
inline DepthImage simulate_depth(const PerlinField& field, const DepthSimParams& params) {
  params.validate();
  Grid<double> d(field.width, field.height);
  for (std::size_t i = 0; i < d.values.size(); ++i)
    d.values[i] = params.alpha * field.values.values[i] + params.beta;
  return DepthImage(std::move(d));
}

/// alpha ~ U(0,1), beta ~ U(0, 1 - alpha); alpha + beta < 1 strictly.
inline DepthSimParams sample_depth_params(Rng& rng) {
  for (;;) {
    const double alpha = rng.uniform_open();
    const double beta = (1.0 - alpha) * rng.uniform_open();
    if (alpha + beta < 1.0) return {alpha, beta};
  }
}

// ---- anomaly masks ------------------------------------------------------------

struct AnomalyMask {
  int width = 0;
  int height = 0;
  BinaryMask mask;
  double coverage = 0.0;
};

inline constexpr int kMaskRetryLimit = 20;

/// Binarizes a freshly sampled normalized Perlin field at `threshold`,
/// intersected with `foreground` when supplied. Empty results are resampled.
inline AnomalyMask generate_anomaly_mask(int width, int height, double threshold, Rng& rng,
                                         const BinaryMask* foreground = nullptr,
                                         const LatticeRange& range = {},
                                         int retry_limit = kMaskRetryLimit) {
  if (!(threshold >= 0.0 && threshold < 1.0))
    throw ArgumentError("anomaly mask threshold must lie in [0,1), got " +
                        std::to_string(threshold));
  if (foreground && !foreground->same_extent(width, height))
    throw ShapeError("anomaly mask: foreground extent mismatch");
  for (int attempt = 0; attempt < retry_limit; ++attempt) {
    const PerlinField field = sample_perlin(width, height, range, rng);
    AnomalyMask m{width, height, BinaryMask(width, height, 0), 0.0};
    std::size_t positive = 0;
    for (std::size_t i = 0; i < m.mask.values.size(); ++i) {
      const bool on = field.values.values[i] > threshold &&
                      (foreground == nullptr || foreground->values[i] != 0);
      m.mask.values[i] = on ? 1 : 0;
      positive += on;
    }
    if (positive == 0) continue;
    m.coverage = static_cast<double>(positive) / (static_cast<double>(width) * height);
    return m;
  }
  throw DegenerateError("degenerate anomaly mask");
}

/// Three independent normalized Perlin channels.
inline RgbImage perlin_texture(int width, int height, const LatticeRange& range, Rng& rng) {
  RgbImage img(width, height);
  for (int c = 0; c < 3; ++c) {
    const PerlinField f = sample_perlin(width, height, range, rng);
    std::copy(f.values.values.begin(), f.values.values.end(),
              img.planes.begin() + static_cast<std::ptrdiff_t>(c) * width * height);
  }
  return img;
}

}  // namespace tdsr::depthsim
