#pragma once

// Depth preprocessing for sorted point clouds: normalization, hole filling,
// background plane estimation and foreground segmentation.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "tdsr/errors.hpp"
#include "tdsr/image.hpp"

namespace tdsr::dataio {

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

/// Per-pixel 3D coordinates registered to the image grid.
struct SortedPointCloud {
  int width = 0;
  int height = 0;
  std::vector<double> xyz;  // interleaved x, y, z per pixel, row-major
  BinaryMask validity;

  SortedPointCloud() = default;
  SortedPointCloud(int w, int h)
      : width(w), height(h), xyz(3 * static_cast<std::size_t>(w) * h, 0.0), validity(w, h, 0) {}

  Point3 point(int x, int y) const {
    const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
    return {xyz[i], xyz[i + 1], xyz[i + 2]};
  }
  void set_point(int x, int y, Point3 p) {
    const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
    xyz[i] = p.x;
    xyz[i + 1] = p.y;
    xyz[i + 2] = p.z;
  }
  bool valid(int x, int y) const { return validity.at(x, y) != 0; }

  /// Marks pixels valid where the point is finite and z is nonzero.
  void refresh_validity() {
    validity = BinaryMask(width, height, 0);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const Point3 p = point(x, y);
        validity.at(x, y) =
            std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z) && p.z != 0.0;
      }
  }
};

/// Plane n . p = offset with unit normal.
struct PlaneModel {
  std::array<double, 3> normal{0.0, 0.0, 1.0};
  double offset = 0.0;

  double signed_distance(const Point3& p) const {
    return normal[0] * p.x + normal[1] * p.y + normal[2] * p.z - offset;
  }
};

/// Min-max maps valid z to [0, 1]; invalid pixels stay flagged with value 0.
inline DepthImage normalize_depth(const SortedPointCloud& cloud) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (int y = 0; y < cloud.height; ++y)
    for (int x = 0; x < cloud.width; ++x)
      if (cloud.valid(x, y)) {
        const double z = cloud.point(x, y).z;
        lo = std::min(lo, z);
        hi = std::max(hi, z);
      }
  if (!(hi > lo)) throw DegenerateError("degenerate depth map");
  DepthImage out(cloud.width, cloud.height);
  const double span = hi - lo;
  for (int y = 0; y < cloud.height; ++y)
    for (int x = 0; x < cloud.width; ++x) {
      const bool v = cloud.valid(x, y);
      out.valid.at(x, y) = v;
      out.depth.at(x, y) = v ? (cloud.point(x, y).z - lo) / span : 0.0;
    }
  return out;
}

/// Replaces each invalid pixel by the mean of the valid pixels in its 3x3
/// neighbourhood (judged against the input validity mask), or 0 when there
/// are none. With `iterative`, passes repeat so large holes fill from their
/// rim inward; pixels that never acquire a valid neighbour become 0.
inline DepthImage fill_missing(const DepthImage& in, bool iterative = false) {
  DepthImage cur = in;
  const int w = in.width();
  const int h = in.height();
  for (;;) {
    DepthImage next = cur;
    bool progressed = false;
    bool pending = false;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (cur.valid.at(x, y)) continue;
        double sum = 0.0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int xx = x + dx;
            const int yy = y + dy;
            if ((dx == 0 && dy == 0) || xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
            if (cur.valid.at(xx, yy)) {
              sum += cur.depth.at(xx, yy);
              ++n;
            }
          }
        if (n > 0) {
          next.depth.at(x, y) = sum / n;
          next.valid.at(x, y) = 1;
          progressed = true;
        } else if (iterative) {
          pending = true;
        } else {
          next.depth.at(x, y) = 0.0;
          next.valid.at(x, y) = 1;
        }
      }
    cur = std::move(next);
    if (!iterative || !pending) break;
    if (!progressed) {
      for (std::size_t i = 0; i < cur.valid.values.size(); ++i)
        if (!cur.valid.values[i]) {
          cur.depth.values[i] = 0.0;
          cur.valid.values[i] = 1;
        }
      break;
    }
  }
  return cur;
}

/// Least-squares (orthogonal regression) plane through the valid points
/// lying within `border_width` pixels of the image boundary. The normal is
/// oriented towards +z.
inline PlaneModel fit_background_plane(const SortedPointCloud& cloud, int border_width = 5) {
  if (border_width < 1) throw ArgumentError("plane fit: border width must be >= 1");
  std::vector<Eigen::Vector3d> pts;
  for (int y = 0; y < cloud.height; ++y)
    for (int x = 0; x < cloud.width; ++x) {
      const bool border = x < border_width || y < border_width ||
                          x >= cloud.width - border_width || y >= cloud.height - border_width;
      if (border && cloud.valid(x, y)) {
        const Point3 p = cloud.point(x, y);
        pts.emplace_back(p.x, p.y, p.z);
      }
    }
  if (pts.size() < 3) throw DegenerateError("plane fit underdetermined");
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& p : pts) centroid += p;
  centroid /= static_cast<double>(pts.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : pts) {
    const Eigen::Vector3d d = p - centroid;
    cov.noalias() += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  const Eigen::Vector3d ev = eig.eigenvalues();  // ascending
  if (!(ev(2) > 0.0) || ev(1) <= 1e-12 * ev(2)) throw DegenerateError("plane fit underdetermined");
  Eigen::Vector3d n = eig.eigenvectors().col(0).normalized();
  if (n.z() < 0.0 || (n.z() == 0.0 && (n.x() < 0.0 || (n.x() == 0.0 && n.y() < 0.0)))) n = -n;
  PlaneModel plane;
  plane.normal = {n.x(), n.y(), n.z()};
  plane.offset = n.dot(centroid);
  return plane;
}

/// 1 where the pixel is valid and its point lies farther than tau from the plane.
inline BinaryMask foreground_mask(const SortedPointCloud& cloud, const PlaneModel& plane,
                                  double tau) {
  if (!(tau > 0.0)) throw ArgumentError("foreground mask: tau must be > 0");
  BinaryMask m(cloud.width, cloud.height, 0);
  for (int y = 0; y < cloud.height; ++y)
    for (int x = 0; x < cloud.width; ++x)
      m.at(x, y) = cloud.valid(x, y) && std::abs(plane.signed_distance(cloud.point(x, y))) > tau;
  return m;
}

/// Cloud rescaled by the depth normalization: every coordinate is divided
/// by the valid z range and z is shifted so the nearest valid point sits at
/// 0. Distances in the result are in normalized-depth units.
inline SortedPointCloud normalized_cloud(const SortedPointCloud& cloud) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (int y = 0; y < cloud.height; ++y)
    for (int x = 0; x < cloud.width; ++x)
      if (cloud.valid(x, y)) {
        lo = std::min(lo, cloud.point(x, y).z);
        hi = std::max(hi, cloud.point(x, y).z);
      }
  if (!(hi > lo)) throw DegenerateError("degenerate depth map");
  SortedPointCloud out = cloud;
  const double s = 1.0 / (hi - lo);
  for (int y = 0; y < cloud.height; ++y)
    for (int x = 0; x < cloud.width; ++x)
      if (cloud.valid(x, y)) {
        const Point3 p = cloud.point(x, y);
        out.set_point(x, y, {p.x * s, p.y * s, (p.z - lo) * s});
      }
  return out;
}

struct PreprocessConfig {
  int border_width = 5;
  double tau = 0.005;
  bool iterative_fill = false;
};

/// Normalizes and fills depth and attaches the foreground mask.
inline RgbdSample preprocess(const SortedPointCloud& cloud, RgbImage rgb, std::string id,
                             const PreprocessConfig& cfg = {}) {
  if (rgb.width != cloud.width || rgb.height != cloud.height)
    throw ShapeError("preprocess: rgb " + std::to_string(rgb.width) + "x" +
                     std::to_string(rgb.height) + " vs cloud " + std::to_string(cloud.width) +
                     "x" + std::to_string(cloud.height));
  RgbdSample s;
  s.id = std::move(id);
  s.rgb = std::move(rgb);
  s.depth = fill_missing(normalize_depth(cloud), cfg.iterative_fill);
  const SortedPointCloud unit = normalized_cloud(cloud);
  s.foreground = foreground_mask(unit, fit_background_plane(unit, cfg.border_width), cfg.tau);
  return s;
}

}  // namespace tdsr::dataio
