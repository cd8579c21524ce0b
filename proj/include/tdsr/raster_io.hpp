#pragma once

// Raster file I/O: 32-bit float TIFFs for depth, masks and point clouds,
// 8-bit images for RGB.

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "tdsr/dataio.hpp"
#include "tdsr/errors.hpp"
#include "tdsr/image.hpp"

namespace tdsr::io {

namespace detail {

// Float TIFFs are written uncompressed; OpenCV otherwise picks a lossy
// LogLuv encoding for 3-channel float data.
inline const std::vector<int>& tiff_params() {
  static const std::vector<int> p{cv::IMWRITE_TIFF_COMPRESSION, 1};
  return p;
}

inline void ensure_parent(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

inline void write_mat(const std::string& path, const cv::Mat& m, const std::vector<int>& params) {
  ensure_parent(path);
  bool ok = false;
  try {
    ok = cv::imwrite(path, m, params);
  } catch (const cv::Exception& e) {
    throw IoError(path, e.what());
  }
  if (!ok) throw IoError(path, "encoder rejected the image");
}

inline cv::Mat read_mat(const std::string& path, int flags) {
  if (!std::filesystem::exists(path)) throw IoError(path, "no such file");
  cv::Mat m;
  try {
    m = cv::imread(path, flags);
  } catch (const cv::Exception& e) {
    throw IoError(path, e.what());
  }
  if (m.empty()) throw IoError(path, "unreadable or unsupported image");
  return m;
}

}  // namespace detail

/// Single-channel 32-bit float TIFF.
inline void write_float_raster(const std::string& path, const Grid<double>& g) {
  cv::Mat m(g.height, g.width, CV_32FC1);
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x) m.at<float>(y, x) = static_cast<float>(g.at(x, y));
  detail::write_mat(path, m, detail::tiff_params());
}

inline Grid<double> read_float_raster(const std::string& path) {
  cv::Mat m = detail::read_mat(path, cv::IMREAD_UNCHANGED);
  if (m.channels() != 1)
    throw IoError(path, "expected 1 channel, found " + std::to_string(m.channels()));
  m.convertTo(m, CV_64F);
  Grid<double> g(m.cols, m.rows);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) g.at(x, y) = m.at<double>(y, x);
  return g;
}

inline void write_mask(const std::string& path, const BinaryMask& mask) {
  Grid<double> g(mask.width, mask.height);
  for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = mask.values[i] ? 1.0 : 0.0;
  write_float_raster(path, g);
}

inline BinaryMask read_mask(const std::string& path) {
  const Grid<double> g = read_float_raster(path);
  BinaryMask m(g.width, g.height, 0);
  for (std::size_t i = 0; i < g.values.size(); ++i) m.values[i] = g.values[i] > 0.5;
  return m;
}

/// 3-channel float TIFF with x, y, z in file channel order (MVTec3D layout).
inline void write_point_cloud(const std::string& path, const dataio::SortedPointCloud& cloud) {
  cv::Mat m(cloud.height, cloud.width, CV_32FC3);
  for (int y = 0; y < cloud.height; ++y)
    for (int x = 0; x < cloud.width; ++x) {
      const auto p = cloud.point(x, y);
      // OpenCV stores channels reversed on disk.
      m.at<cv::Vec3f>(y, x) =
          cv::Vec3f(static_cast<float>(p.z), static_cast<float>(p.y), static_cast<float>(p.x));
    }
  detail::write_mat(path, m, detail::tiff_params());
}

inline dataio::SortedPointCloud load_point_cloud(const std::string& path) {
  cv::Mat m = detail::read_mat(path, cv::IMREAD_UNCHANGED);
  if (m.channels() != 3)
    throw IoError(path, "expected 3 channels, found " + std::to_string(m.channels()));
  if (m.depth() != CV_32F && m.depth() != CV_64F)
    throw IoError(path, "expected floating-point samples");
  if (m.rows < 1 || m.cols < 1) throw IoError(path, "empty raster");
  m.convertTo(m, CV_64FC3);
  dataio::SortedPointCloud cloud(m.cols, m.rows);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) {
      const cv::Vec3d v = m.at<cv::Vec3d>(y, x);
      cloud.set_point(x, y, {v[2], v[1], v[0]});
    }
  cloud.refresh_validity();
  return cloud;
}

/// 8-bit RGB, values rounded from [0, 1].
inline void write_rgb(const std::string& path, const RgbImage& img) {
  cv::Mat m(img.height, img.width, CV_8UC3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      auto q = [&](int c) {
        return cv::saturate_cast<unsigned char>(std::lround(std::clamp(img.at(c, x, y), 0.0, 1.0) * 255.0));
      };
      m.at<cv::Vec3b>(y, x) = cv::Vec3b(q(2), q(1), q(0));
    }
  detail::write_mat(path, m, {});
}

inline RgbImage mat_to_rgb(const cv::Mat& bgr) {
  RgbImage img(bgr.cols, bgr.rows);
  for (int y = 0; y < bgr.rows; ++y)
    for (int x = 0; x < bgr.cols; ++x) {
      const cv::Vec3b v = bgr.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) img.at(c, x, y) = v[2 - c] / 255.0;
    }
  return img;
}

/// Reads any 8-bit image OpenCV understands as RGB in [0, 1]; optionally
/// area-resampled to width x height.
inline RgbImage read_rgb(const std::string& path, int width = 0, int height = 0) {
  cv::Mat m = detail::read_mat(path, cv::IMREAD_COLOR);
  if (width > 0 && height > 0 && (m.cols != width || m.rows != height))
    cv::resize(m, m, cv::Size(width, height), 0, 0, cv::INTER_AREA);
  return mat_to_rgb(m);
}

inline bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" ||
         ext == ".tiff";
}

/// Sorted list of image files directly inside `dir`.
inline std::vector<std::string> list_images(const std::string& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError(dir, "not a directory");
  std::vector<std::string> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace tdsr::io
