#pragma once

// On-disk RGB-D datasets and the synthetic pretraining corpus.
//
// Layout of a dataset directory:
//   manifest.jsonl      one JSON record per sample
//   rgb/<id>.png        8-bit RGB
//   depth/<id>.tiff     normalized depth, float32
//   foreground/<id>.tiff, gt/<id>.tiff   optional masks

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tdsr/depthsim.hpp"
#include "tdsr/raster_io.hpp"

namespace tdsr::dataio {

using Json = nlohmann::json;

inline constexpr const char* kManifestName = "manifest.jsonl";

/// SplitMix64 finalizer over (seed, stream); gives per-sample seeds that do
/// not depend on how many samples precede them.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct DatasetRecord {
  RgbdSample sample;
  Json meta = Json::object();  // provenance: seeds, parameters, sources
};

inline void write_manifest(const std::string& path, const std::vector<Json>& records) {
  std::ofstream out(path);
  if (!out) throw IoError(path, "cannot open manifest for writing");
  for (const auto& r : records) out << r.dump() << '\n';
  if (!out) throw IoError(path, "manifest write failed");
}

inline std::vector<Json> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open manifest");
  std::vector<Json> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(Json::parse(line));
    } catch (const Json::exception& e) {
      throw IoError(path, "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

/// Writes samples and their manifest into `dir` (created if needed).
inline void write_dataset(const std::string& dir, const std::vector<DatasetRecord>& records) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<Json> manifest;
  manifest.reserve(records.size());
  for (const auto& r : records) {
    const RgbdSample& s = r.sample;
    s.validate();
    Json j = r.meta;
    j["id"] = s.id;
    j["label"] = to_string(s.label);
    j["width"] = s.width();
    j["height"] = s.height();
    j["rgb"] = "rgb/" + s.id + ".png";
    j["depth"] = "depth/" + s.id + ".tiff";
    io::write_rgb((fs::path(dir) / j["rgb"].get<std::string>()).string(), s.rgb);
    io::write_float_raster((fs::path(dir) / j["depth"].get<std::string>()).string(),
                           s.depth.depth);
    if (s.foreground) {
      j["foreground"] = "foreground/" + s.id + ".tiff";
      io::write_mask((fs::path(dir) / j["foreground"].get<std::string>()).string(),
                     *s.foreground);
    }
    if (s.gt_mask) {
      j["gt"] = "gt/" + s.id + ".tiff";
      io::write_mask((fs::path(dir) / j["gt"].get<std::string>()).string(), *s.gt_mask);
    }
    manifest.push_back(std::move(j));
  }
  write_manifest((fs::path(dir) / kManifestName).string(), manifest);
}

inline std::vector<DatasetRecord> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string mpath = (fs::path(dir) / kManifestName).string();
  if (!fs::exists(mpath)) throw IoError(dir, "no manifest.jsonl (not a dataset directory)");
  std::vector<DatasetRecord> out;
  for (Json& j : read_manifest(mpath)) {
    DatasetRecord r;
    RgbdSample& s = r.sample;
    try {
      s.id = j.at("id").get<std::string>();
      s.label = label_from_string(j.at("label").get<std::string>());
      s.rgb = io::read_rgb((fs::path(dir) / j.at("rgb").get<std::string>()).string());
      s.depth = DepthImage(
          io::read_float_raster((fs::path(dir) / j.at("depth").get<std::string>()).string()));
      if (j.contains("foreground"))
        s.foreground =
            io::read_mask((fs::path(dir) / j["foreground"].get<std::string>()).string());
      if (j.contains("gt"))
        s.gt_mask = io::read_mask((fs::path(dir) / j["gt"].get<std::string>()).string());
    } catch (const Json::exception& e) {
      throw IoError(mpath, std::string("malformed record: ") + e.what());
    }
    s.validate();
    r.meta = std::move(j);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<RgbdSample> samples_of(std::vector<DatasetRecord> records) {
  std::vector<RgbdSample> out;
  out.reserve(records.size());
  for (auto& r : records) out.push_back(std::move(r.sample));
  return out;
}

// ---- synthetic pretraining corpus ------------------------------------------------

enum class DepthMode {
  perlin_affine,  // D = alpha * P + beta
  no_affine,      // D = P
  no_perlin,      // D = grayscale of an unrelated RGB image
};

inline const char* to_string(DepthMode m) {
  switch (m) {
    case DepthMode::perlin_affine: return "perlin_affine";
    case DepthMode::no_affine: return "no_affine";
    case DepthMode::no_perlin: return "no_perlin";
  }
  return "?";
}

inline DepthMode depth_mode_from_string(const std::string& s) {
  if (s == "perlin_affine") return DepthMode::perlin_affine;
  if (s == "no_affine") return DepthMode::no_affine;
  if (s == "no_perlin") return DepthMode::no_perlin;
  throw ConfigError("unknown depth mode '" + s + "'");
}

struct CorpusConfig {
  int count = 500;
  int width = 32;
  int height = 32;
  std::uint64_t seed = 0;
  /// Directory of RGB images; empty selects procedural Perlin textures.
  std::string rgb_dir;
  DepthMode depth_mode = DepthMode::perlin_affine;
  depthsim::LatticeRange lattice{1, 5};
};

namespace detail {

struct RgbSource {
  std::vector<std::string> files;
  int width = 0;
  int height = 0;
  depthsim::LatticeRange lattice;

  bool procedural() const { return files.empty(); }

  RgbImage draw(Rng& rng, Json& meta, const char* key) const {
    if (procedural()) {
      meta[key] = "procedural";
      return depthsim::perlin_texture(width, height, lattice, rng);
    }
    const auto& f = files[rng.below(files.size())];
    meta[key] = std::filesystem::path(f).filename().string();
    return io::read_rgb(f, width, height);
  }
};

}  // namespace detail

/// Pairs RGB images with independently simulated depth. Sample i depends
/// only on (seed, i).
inline std::vector<DatasetRecord> build_synthetic_corpus(const CorpusConfig& cfg) {
  if (cfg.count < 0) throw ConfigError("corpus.count must be >= 0");
  if (cfg.width < 2 || cfg.height < 2) throw ConfigError("corpus extent must be >= 2x2");
  detail::RgbSource src{{}, cfg.width, cfg.height, cfg.lattice};
  if (!cfg.rgb_dir.empty()) {
    src.files = io::list_images(cfg.rgb_dir);
    if (src.files.empty()) throw ConfigError("corpus.rgb_dir '" + cfg.rgb_dir + "' has no images");
  }
  std::vector<DatasetRecord> out;
  out.reserve(cfg.count);
  for (int i = 0; i < cfg.count; ++i) {
    const std::uint64_t sseed = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
    Rng rng(sseed);
    DatasetRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "s%06d", i);
    r.sample.id = id;
    r.meta["seed"] = sseed;
    r.meta["depth_mode"] = to_string(cfg.depth_mode);
    r.sample.rgb = src.draw(rng, r.meta, "rgb_source");
    switch (cfg.depth_mode) {
      case DepthMode::perlin_affine:
      case DepthMode::no_affine: {
        const auto field = depthsim::sample_perlin(cfg.width, cfg.height, cfg.lattice, rng);
        const depthsim::DepthSimParams p = cfg.depth_mode == DepthMode::no_affine
                                               ? depthsim::DepthSimParams{1.0, 0.0}
                                               : depthsim::sample_depth_params(rng);
        r.sample.depth = depthsim::simulate_depth(field, p);
        r.meta["alpha"] = p.alpha;
        r.meta["beta"] = p.beta;
        r.meta["lattice_x"] = field.lattice_x;
        r.meta["lattice_y"] = field.lattice_y;
        r.meta["perlin_seed"] = field.seed;
        break;
      }
      case DepthMode::no_perlin: {
        const RgbImage other = src.draw(rng, r.meta, "depth_source");
        r.sample.depth = DepthImage(other.grayscale());
        break;
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace tdsr::dataio
