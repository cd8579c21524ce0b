#pragma once

// A procedural "object class" standing in for one MVTec3D category: a dome
// on a slightly tilted table, seen as a sorted point cloud plus RGB, and
// an image-space corruption routine producing test anomalies.
//
// The corruption routine is deliberately unrelated to the feature-space
// injector used in training: elliptic blobs that recolor the surface or
// push it in or out.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "tdsr/corpus.hpp"
#include "tdsr/dataio.hpp"
#include "tdsr/depthsim.hpp"

namespace tdsr::synth {

struct ObjectClassConfig {
  int width = 32;
  int height = 32;
  double pixel_pitch = 1.0;      // x/y spacing of the point grid
  double table_distance = 100.0; // z of the table at the image centre
  double max_tilt = 0.03;        // |dz/dx|, |dz/dy| of the table
  double radius_min = 8.0;       // dome radius in pixels
  double radius_max = 10.0;
  double height_min = 5.0;       // dome height in z units
  double height_max = 6.0;
  double center_jitter = 2.0;
  double dropout = 0.01;         // fraction of missing returns
  double shading_strength = 0.15;
};

struct RenderedObject {
  dataio::SortedPointCloud cloud;
  RgbImage rgb;
};

namespace detail {

inline double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace detail

/// One defect-free instance.
inline RenderedObject render_object(const ObjectClassConfig& cfg, Rng& rng) {
  const int W = cfg.width, H = cfg.height;
  const double cx = W / 2.0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter);
  const double cy = H / 2.0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter);
  const double r = rng.uniform(cfg.radius_min, cfg.radius_max);
  const double h = rng.uniform(cfg.height_min, cfg.height_max);
  const double tx = rng.uniform(-cfg.max_tilt, cfg.max_tilt);
  const double ty = rng.uniform(-cfg.max_tilt, cfg.max_tilt);
  const depthsim::LatticeRange low{1, 2};
  const auto shade_bg = depthsim::sample_perlin(W, H, low, rng);
  const auto shade_obj = depthsim::sample_perlin(W, H, low, rng);
  const double tone = rng.uniform(-0.04, 0.04);
  // Light from the upper left.
  const double lx = -0.4, ly = -0.4, lz = std::sqrt(1.0 - 0.32);

  RenderedObject out{dataio::SortedPointCloud(W, H), RgbImage(W, H)};
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double px = (x + 0.5 - W / 2.0) * cfg.pixel_pitch;
      const double py = (y + 0.5 - H / 2.0) * cfg.pixel_pitch;
      const double table = cfg.table_distance + tx * px + ty * py;
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double q = (dx * dx + dy * dy) / (r * r);
      // Dome rising towards the camera (smaller z).
      const double lift = q < 1.0 ? h * (1.0 - q) : 0.0;
      const bool missing = rng.uniform() < cfg.dropout;
      out.cloud.set_point(x, y, {px, py, missing ? 0.0 : table - lift});

      double c[3];
      if (q < 1.0) {
        // Surface normal of z = h (1 - q) in pixel units.
        const double gx = -2.0 * h * dx / (r * r), gy = -2.0 * h * dy / (r * r);
        const double n = std::sqrt(gx * gx + gy * gy + 1.0);
        const double lambert = std::max(0.0, (-gx * lx - gy * ly + lz) / n);
        const double s = 0.55 + 0.45 * lambert + cfg.shading_strength * (shade_obj.values.at(x, y) - 0.5);
        c[0] = 0.85 * s + tone;
        c[1] = 0.50 * s + tone;
        c[2] = 0.20 * s + tone;
      } else {
        const double s = 1.0 + cfg.shading_strength * (shade_bg.values.at(x, y) - 0.5);
        c[0] = 0.30 * s + tone;
        c[1] = 0.35 * s + tone;
        c[2] = 0.45 * s + tone;
      }
      for (int ch = 0; ch < 3; ++ch) out.rgb.at(ch, x, y) = detail::clamp01(c[ch]);
    }
  out.cloud.refresh_validity();
  return out;
}

// ---- test-time corruption -----------------------------------------------------------

enum class DefectKind { color, depth, combined };

inline const char* to_string(DefectKind k) {
  switch (k) {
    case DefectKind::color: return "color";
    case DefectKind::depth: return "depth";
    case DefectKind::combined: return "combined";
  }
  return "?";
}

struct CorruptionConfig {
  double axis_min = 3.0;  // ellipse semi-axes in pixels
  double axis_max = 6.0;
  double depth_min = 0.03;  // offset as a fraction of the cloud's z range
  double depth_max = 0.06;
  double color_blend = 0.75;
  int blobs_max = 2;
};

struct Corruption {
  BinaryMask mask;
  DefectKind kind = DefectKind::color;
  int blobs = 0;
};

/// Paints 1..blobs_max random ellipses restricted to `foreground` into the
/// cloud and RGB. Returns the affected pixels; may be empty when the
/// foreground is empty.
inline Corruption corrupt(RenderedObject& obj, const BinaryMask& foreground,
                          const CorruptionConfig& cfg, Rng& rng) {
  const int W = obj.rgb.width, H = obj.rgb.height;
  Corruption c{BinaryMask(W, H, 0), static_cast<DefectKind>(rng.below(3)), 0};
  std::vector<int> fg;
  for (int i = 0; i < W * H; ++i)
    if (foreground.values[i]) fg.push_back(i);
  if (fg.empty()) return c;

  double zlo = 1e300, zhi = -1e300;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (obj.cloud.valid(x, y)) {
        zlo = std::min(zlo, obj.cloud.point(x, y).z);
        zhi = std::max(zhi, obj.cloud.point(x, y).z);
      }
  const double zspan = zhi > zlo ? zhi - zlo : 1.0;

  c.blobs = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.blobs_max)));
  for (int k = 0; k < c.blobs; ++k) {
    const int centre = fg[rng.below(fg.size())];
    const double cx = centre % W + 0.5, cy = centre / W + 0.5;
    const double a = rng.uniform(cfg.axis_min, cfg.axis_max);
    const double b = rng.uniform(cfg.axis_min, cfg.axis_max);
    const double th = rng.uniform(0.0, std::numbers::pi);
    const double ct = std::cos(th), st = std::sin(th);
    const double offset = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(cfg.depth_min, cfg.depth_max) * zspan;
    double tint[3];
    for (auto& t : tint) t = rng.uniform();
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (!foreground.at(x, y)) continue;
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u = (ct * dx + st * dy) / a, v = (-st * dx + ct * dy) / b;
        if (u * u + v * v > 1.0) continue;
        c.mask.at(x, y) = 1;
        if (c.kind != DefectKind::depth)
          for (int ch = 0; ch < 3; ++ch)
            obj.rgb.at(ch, x, y) = (1.0 - cfg.color_blend) * obj.rgb.at(ch, x, y) + cfg.color_blend * tint[ch];
        if (c.kind != DefectKind::color && obj.cloud.valid(x, y)) {
          auto p = obj.cloud.point(x, y);
          p.z += offset;
          obj.cloud.set_point(x, y, p);
        }
      }
  }
  return c;
}

// ---- datasets -----------------------------------------------------------------------

struct ObjectDatasetConfig {
  ObjectClassConfig object;
  CorruptionConfig corruption;
  dataio::PreprocessConfig preprocess;
  int train_count = 500;
  int test_normal = 50;
  int test_anomalous = 50;
  std::uint64_t seed = 0;
};

struct ObjectDatasets {
  std::vector<dataio::DatasetRecord> train;
  std::vector<dataio::DatasetRecord> test;
};

inline dataio::DatasetRecord make_record(RenderedObject obj, const std::string& id,
                                         std::uint64_t seed,
                                         const dataio::PreprocessConfig& pp) {
  dataio::DatasetRecord r;
  r.sample = dataio::preprocess(obj.cloud, std::move(obj.rgb), id, pp);
  r.meta["seed"] = seed;
  return r;
}

/// Normal training samples plus a test split of normals and corrupted
/// instances, all passed through the standard preprocessing.
inline ObjectDatasets build_object_datasets(const ObjectDatasetConfig& cfg) {
  ObjectDatasets out;
  char id[32];
  for (int i = 0; i < cfg.train_count; ++i) {
    const std::uint64_t s = dataio::derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
    Rng rng(s);
    std::snprintf(id, sizeof id, "train_%05d", i);
    out.train.push_back(make_record(render_object(cfg.object, rng), id, s, cfg.preprocess));
  }
  const std::uint64_t test_seed = dataio::derive_seed(cfg.seed, 0x7e57ull << 32);
  for (int i = 0; i < cfg.test_normal + cfg.test_anomalous; ++i) {
    const std::uint64_t s = dataio::derive_seed(test_seed, static_cast<std::uint64_t>(i));
    Rng rng(s);
    RenderedObject obj = render_object(cfg.object, rng);
    const bool anomalous = i >= cfg.test_normal;
    std::snprintf(id, sizeof id, "test_%05d", i);
    if (!anomalous) {
      auto r = make_record(std::move(obj), id, s, cfg.preprocess);
      r.sample.gt_mask = BinaryMask(r.sample.width(), r.sample.height(), 0);
      out.test.push_back(std::move(r));
      continue;
    }
    // Defects are placed on the foreground of the clean instance.
    const BinaryMask fg = dataio::preprocess(obj.cloud, obj.rgb, id, cfg.preprocess).foreground.value();
    const Corruption c = corrupt(obj, fg, cfg.corruption, rng);
    auto r = make_record(std::move(obj), id, s, cfg.preprocess);
    r.sample.label = count_positive(c.mask) > 0 ? Label::anomalous : Label::normal;
    r.sample.gt_mask = c.mask;
    r.meta["defect"] = to_string(c.kind);
    r.meta["blobs"] = c.blobs;
    out.test.push_back(std::move(r));
  }
  return out;
}

}  // namespace tdsr::synth
