#pragma once

// Detection and localization metrics, evaluation reports and the
// throughput harness.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "tdsr/errors.hpp"
#include "tdsr/image.hpp"

namespace tdsr::metrics {

using Json = nlohmann::json;

// ---- AUROC -------------------------------------------------------------------------

/// P(score_pos > score_neg) + P(tie) / 2, from exact pair counts.
inline double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size())
    throw ShapeError("auroc: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(labels.size()) + " labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  // Walk ascending tie groups; each positive beats every negative below its
  // group and ties with the negatives inside it.
  std::int64_t pos = 0, neg = 0;
  std::int64_t twice_wins = 0;  // 2 * wins + ties
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::int64_t gp = 0, gn = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? gp : gn) += 1;
      ++j;
    }
    twice_wins += gp * (2 * neg + gn);
    pos += gp;
    neg += gn;
    i = j;
  }
  if (pos == 0 || neg == 0) throw DegenerateError("AUROC undefined: only one class present");
  return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

inline double auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  return auroc(std::span<const double>(scores), std::span<const std::uint8_t>(labels));
}

/// AUROC over the pooled pixels of all maps.
inline double pixel_auroc(std::span<const Grid<double>> maps, std::span<const BinaryMask> gts) {
  if (maps.size() != gts.size()) throw ShapeError("pixel_auroc: map / mask count mismatch");
  std::vector<double> s;
  std::vector<std::uint8_t> l;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (!maps[i].same_extent(gts[i])) throw ShapeError("pixel_auroc: extent mismatch at " + std::to_string(i));
    s.insert(s.end(), maps[i].values.begin(), maps[i].values.end());
    for (auto v : gts[i].values) l.push_back(v != 0);
  }
  return auroc(s, l);
}

// ---- connected components ---------------------------------------------------------

/// 8-connected labelling of positive pixels; labels start at 0, background -1.
inline std::vector<int> label_components(const BinaryMask& m, int* count = nullptr) {
  std::vector<int> lab(m.values.size(), -1);
  int next = 0;
  std::vector<int> stack;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * m.width + x;
      if (!m.values[i] || lab[i] >= 0) continue;
      lab[i] = next;
      stack.assign(1, static_cast<int>(i));
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int px = p % m.width, py = p / m.width;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int qx = px + dx, qy = py + dy;
            if (qx < 0 || qy < 0 || qx >= m.width || qy >= m.height) continue;
            const std::size_t q = static_cast<std::size_t>(qy) * m.width + qx;
            if (m.values[q] && lab[q] < 0) {
              lab[q] = next;
              stack.push_back(static_cast<int>(q));
            }
          }
      }
      ++next;
    }
  if (count) *count = next;
  return lab;
}

// ---- AUPRO ---------------------------------------------------------------------------

enum class SweepMode { exact, binned };

struct ProCurve {
  std::vector<double> fpr;  // starts at 0
  std::vector<double> pro;  // starts at 0
};

namespace detail {

struct PixelRef {
  double score;
  int region;  // -1 for negatives
};

}  // namespace detail

/// Number of thresholds retained by SweepMode::binned.
inline constexpr int kProBins = 500;

/// PRO vs FPR, one point per threshold (descending). Exact mode uses every
/// unique score. Binned mode keeps kProBins score quantiles; its points
/// are a subset of the exact curve, so its normalized area deviates from the
/// exact one by at most the largest FPR gap between retained points divided
/// by the integration limit.
inline ProCurve pro_curve(std::span<const Grid<double>> maps, std::span<const BinaryMask> gts,
                          SweepMode mode = SweepMode::exact) {
  if (maps.size() != gts.size()) throw ShapeError("aupro: map / mask count mismatch");
  std::vector<detail::PixelRef> px;
  std::vector<std::int64_t> region_size;
  std::int64_t negatives = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (!maps[i].same_extent(gts[i])) throw ShapeError("aupro: extent mismatch at " + std::to_string(i));
    int n = 0;
    const auto lab = label_components(gts[i], &n);
    const int base = static_cast<int>(region_size.size());
    region_size.resize(region_size.size() + n, 0);
    for (std::size_t p = 0; p < lab.size(); ++p) {
      const int r = lab[p] < 0 ? -1 : base + lab[p];
      if (r < 0) ++negatives; else ++region_size[r];
      px.push_back({maps[i].values[p], r});
    }
  }
  if (region_size.empty()) throw DegenerateError("AUPRO undefined: no anomalous regions");
  if (negatives == 0) throw DegenerateError("AUPRO undefined: no normal pixels");
  std::sort(px.begin(), px.end(),
            [](const detail::PixelRef& a, const detail::PixelRef& b) { return a.score > b.score; });

  std::vector<double> thresholds;
  if (mode == SweepMode::exact) {
    for (std::size_t i = 0; i < px.size(); ++i)
      if (i == 0 || px[i].score != px[i - 1].score) thresholds.push_back(px[i].score);
  } else {
    for (int b = 0; b < kProBins; ++b) {
      const std::size_t idx = static_cast<std::size_t>(
          static_cast<double>(b) / (kProBins - 1) * static_cast<double>(px.size() - 1));
      const double t = px[idx].score;
      if (thresholds.empty() || t < thresholds.back()) thresholds.push_back(t);
    }
    if (thresholds.back() != px.back().score) thresholds.push_back(px.back().score);
  }

  const double R = static_cast<double>(region_size.size());
  std::vector<std::int64_t> hit(region_size.size(), 0);
  std::int64_t fp = 0;
  ProCurve c;
  c.fpr.push_back(0.0);
  c.pro.push_back(0.0);
  std::size_t k = 0;
  for (double t : thresholds) {
    for (; k < px.size() && px[k].score >= t; ++k) {
      const int r = px[k].region;
      if (r < 0) {
        ++fp;
      } else {
        ++hit[r];
      }
    }
    c.fpr.push_back(static_cast<double>(fp) / static_cast<double>(negatives));
    // Summed from integer counts so rounding does not accumulate.
    double overlap = 0.0;
    for (std::size_t r = 0; r < hit.size(); ++r)
      overlap += static_cast<double>(hit[r]) / static_cast<double>(region_size[r]);
    c.pro.push_back(overlap / R);
  }
  return c;
}

/// Trapezoid area under the curve on [0, limit] divided by limit; the last
/// segment is linearly interpolated at the limit.
inline double normalized_area(const ProCurve& c, double limit) {
  if (!(limit > 0.0 && limit <= 1.0)) throw ArgumentError("aupro: fpr_limit must lie in (0,1]");
  double area = 0.0;
  for (std::size_t i = 1; i < c.fpr.size(); ++i) {
    const double x0 = c.fpr[i - 1], x1 = c.fpr[i];
    if (x0 >= limit) break;
    const double y0 = c.pro[i - 1], y1 = c.pro[i];
    if (x1 <= limit) {
      area += (x1 - x0) * (y0 + y1) / 2.0;
    } else {
      const double yl = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
      area += (limit - x0) * (y0 + yl) / 2.0;
      break;
    }
  }
  return area / limit;
}

inline double aupro(std::span<const Grid<double>> maps, std::span<const BinaryMask> gts,
                    double fpr_limit = 0.3, SweepMode mode = SweepMode::exact) {
  return normalized_area(pro_curve(maps, gts, mode), fpr_limit);
}

// ---- reports ---------------------------------------------------------------------------

struct ImageResult {
  std::string id;
  Label label = Label::normal;
  double score = 0.0;
};

struct EvalReport {
  std::vector<ImageResult> images;
  double i_auroc = 0.0;
  double p_auroc = 0.0;
  double aupro = 0.0;
  double fpr_limit = 0.3;
  Json config = Json::object();
  Json timing = Json::object();
  Json extra = Json::object();

  Json to_json() const {
    Json j;
    j["i_auroc"] = i_auroc;
    j["p_auroc"] = p_auroc;
    j["aupro"] = aupro;
    j["fpr_limit"] = fpr_limit;
    j["images"] = Json::array();
    for (const auto& r : images)
      j["images"].push_back({{"id", r.id}, {"label", to_string(r.label)}, {"score", r.score}});
    j["config"] = config;
    j["timing"] = timing;
    if (!extra.empty()) j["extra"] = extra;
    return j;
  }

  static EvalReport from_json(const Json& j) {
    EvalReport r;
    r.i_auroc = j.at("i_auroc").get<double>();
    r.p_auroc = j.at("p_auroc").get<double>();
    r.aupro = j.at("aupro").get<double>();
    r.fpr_limit = j.value("fpr_limit", 0.3);
    for (const auto& e : j.at("images"))
      r.images.push_back({e.at("id").get<std::string>(),
                          label_from_string(e.at("label").get<std::string>()),
                          e.at("score").get<double>()});
    r.config = j.value("config", Json::object());
    r.timing = j.value("timing", Json::object());
    r.extra = j.value("extra", Json::object());
    return r;
  }

  /// Metric values and per-image scores only (no timings).
  Json results_json() const {
    Json j = to_json();
    j.erase("timing");
    return j;
  }
};

/// Computes all three metrics. Pixel metrics use every image carrying a
/// ground-truth mask (normal images contribute all-negative masks).
inline EvalReport evaluate(std::vector<ImageResult> images, const std::vector<Grid<double>>& maps,
                           const std::vector<BinaryMask>& gts, double fpr_limit = 0.3,
                           SweepMode mode = SweepMode::exact) {
  EvalReport r;
  r.fpr_limit = fpr_limit;
  std::vector<double> s;
  std::vector<std::uint8_t> l;
  for (const auto& im : images) {
    s.push_back(im.score);
    l.push_back(im.label == Label::anomalous);
  }
  r.images = std::move(images);
  r.i_auroc = auroc(s, l);
  r.p_auroc = pixel_auroc(maps, gts);
  r.aupro = aupro(maps, gts, fpr_limit, mode);
  return r;
}

// ---- throughput ---------------------------------------------------------------------------

struct BenchReport {
  std::size_t samples = 0;
  int width = 0;
  int height = 0;
  int repetitions = 0;
  int warmup = 0;
  int threads = 1;
  std::vector<double> seconds;  // per repetition
  double mean_fps = 0.0;
  double median_fps = 0.0;
  double total_seconds = 0.0;

  Json to_json() const {
    return {{"samples", samples},       {"width", width},
            {"height", height},         {"repetitions", repetitions},
            {"warmup", warmup},         {"threads", threads},
            {"seconds", seconds},       {"mean_fps", mean_fps},
            {"median_fps", median_fps}, {"total_seconds", total_seconds}};
  }
};

/// Times `infer(i)` over samples 0..count-1 for each repetition after
/// `warmup` untimed passes. With threads > 1, samples are handed out through
/// an atomic cursor.
inline BenchReport fps_bench(const std::function<void(std::size_t)>& infer, std::size_t count,
                             int width, int height, int repetitions, int warmup = 1,
                             int threads = 1) {
  if (repetitions <= 0) throw ArgumentError("empty benchmark");
  if (count == 0) throw ArgumentError("empty benchmark: no samples");
  if (threads < 1) throw ArgumentError("bench: threads must be >= 1");
  auto pass = [&] {
    if (threads == 1) {
      for (std::size_t i = 0; i < count; ++i) infer(i);
      return;
    }
    std::atomic<std::size_t> cursor{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i; (i = cursor.fetch_add(1)) < count;) infer(i);
      });
    for (auto& th : pool) th.join();
  };
  for (int w = 0; w < warmup; ++w) pass();
  BenchReport r;
  r.samples = count;
  r.width = width;
  r.height = height;
  r.repetitions = repetitions;
  r.warmup = warmup;
  r.threads = threads;
  std::vector<double> fps;
  for (int k = 0; k < repetitions; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    pass();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.seconds.push_back(s);
    r.total_seconds += s;
    fps.push_back(static_cast<double>(count) / std::max(s, 1e-12));
  }
  double sum = 0.0;
  for (double f : fps) sum += f;
  r.mean_fps = sum / static_cast<double>(fps.size());
  std::sort(fps.begin(), fps.end());
  const std::size_t m = fps.size();
  r.median_fps = m % 2 ? fps[m / 2] : 0.5 * (fps[m / 2 - 1] + fps[m / 2]);
  return r;
}

}  // namespace tdsr::metrics
