#pragma once

// Reads one MVTec3D-style object class:
//   <class>/train/good/{rgb/*.png, xyz/*.tiff}
//   <class>/test/<defect>/{rgb/*.png, xyz/*.tiff, gt/*.png}
// and converts it into preprocessed datasets at a working resolution.

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "tdsr/corpus.hpp"
#include "tdsr/dataio.hpp"
#include "tdsr/raster_io.hpp"

namespace tdsr::dataio {

/// Nearest-neighbour resampling keeps every point an actual sensor return.
inline SortedPointCloud resize_cloud(const SortedPointCloud& c, int width, int height) {
  if (c.width == width && c.height == height) return c;
  SortedPointCloud out(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(c.width - 1, static_cast<int>((x + 0.5) * c.width / width));
      const int sy = std::min(c.height - 1, static_cast<int>((y + 0.5) * c.height / height));
      out.set_point(x, y, c.point(sx, sy));
    }
  out.refresh_validity();
  return out;
}

inline BinaryMask read_gt_png(const std::string& path, int width, int height) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw IoError(path, "unreadable ground-truth mask");
  if (m.cols != width || m.rows != height)
    cv::resize(m, m, cv::Size(width, height), 0, 0, cv::INTER_NEAREST);
  BinaryMask out(width, height, 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out.at(x, y) = m.at<unsigned char>(y, x) > 127;
  return out;
}

struct IngestOptions {
  int width = 32;
  int height = 32;
  int limit = 0;  // per defect directory; 0 = all
  PreprocessConfig preprocess;
};

/// One directory holding rgb/*.png and xyz/*.tiff (and optionally gt/*.png).
/// Samples are labelled normal when `kind` is "good".
inline std::vector<DatasetRecord> ingest_directory(const std::string& dir, const std::string& kind,
                                                   const IngestOptions& opt) {
  namespace fs = std::filesystem;
  const fs::path base(dir);
  if (!fs::is_directory(base / "rgb") || !fs::is_directory(base / "xyz"))
    throw IoError(dir, "expected rgb/ and xyz/ subdirectories");
  std::vector<DatasetRecord> out;
  for (const auto& rgb_path : io::list_images((base / "rgb").string())) {
    if (opt.limit > 0 && static_cast<int>(out.size()) >= opt.limit) break;
    const std::string stem = fs::path(rgb_path).stem().string();
    const fs::path xyz = base / "xyz" / (stem + ".tiff");
    const SortedPointCloud cloud =
        resize_cloud(io::load_point_cloud(xyz.string()), opt.width, opt.height);
    DatasetRecord r;
    r.sample = preprocess(cloud, io::read_rgb(rgb_path, opt.width, opt.height),
                          kind + "_" + stem, opt.preprocess);
    const bool good = kind == "good";
    r.sample.label = good ? Label::normal : Label::anomalous;
    const fs::path gt = base / "gt" / (stem + ".png");
    if (fs::exists(gt))
      r.sample.gt_mask = read_gt_png(gt.string(), opt.width, opt.height);
    else if (good)
      r.sample.gt_mask = BinaryMask(opt.width, opt.height, 0);
    r.meta["source"] = rgb_path;
    r.meta["defect"] = kind;
    out.push_back(std::move(r));
  }
  return out;
}

/// Samples of one split directory (train or test), every defect type.
inline std::vector<DatasetRecord> ingest_split(const std::string& split_dir,
                                               const IngestOptions& opt) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(split_dir)) throw IoError(split_dir, "not a directory");
  std::vector<std::string> kinds;
  for (const auto& e : fs::directory_iterator(split_dir))
    if (e.is_directory() && fs::is_directory(e.path() / "rgb") && fs::is_directory(e.path() / "xyz"))
      kinds.push_back(e.path().filename().string());
  std::sort(kinds.begin(), kinds.end());
  std::vector<DatasetRecord> out;
  for (const auto& kind : kinds)
    for (auto& r : ingest_directory((fs::path(split_dir) / kind).string(), kind, opt))
      out.push_back(std::move(r));
  return out;
}

}  // namespace tdsr::dataio
