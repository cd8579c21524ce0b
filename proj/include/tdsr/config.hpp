#pragma once

// Resolved run configuration: flat "section.key = value" text.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>

#include "tdsr/corpus.hpp"
#include "tdsr/dada.hpp"
#include "tdsr/metrics.hpp"
#include "tdsr/pipeline.hpp"
#include "tdsr/synthetic.hpp"

namespace tdsr {

inline constexpr const char* kDataRootEnv = "TDSR_DATA_ROOT";

/// Value of TDSR_DATA_ROOT, or empty.
inline std::string default_data_root() {
  const char* v = std::getenv(kDataRootEnv);
  return v ? std::string(v) : std::string();
}

/// Relative paths that do not exist locally are looked up under the data root.
inline std::string resolve_data_path(const std::string& path) {
  namespace fs = std::filesystem;
  if (path.empty() || fs::path(path).is_absolute() || fs::exists(path)) return path;
  const std::string root = default_data_root();
  if (root.empty()) return path;
  return (fs::path(root) / path).string();
}

struct Ablations {
  bool no_perlin = false;
  bool no_affine = false;
  bool vqvae = false;     // ungrouped DADA
  bool weighted = false;  // lambda_D = 10, lambda_I = 1
};

struct RunConfig {
  std::uint64_t seed = 0;
  Ablations ablation;

  // pretraining corpus
  int corpus_count = 500;
  int width = 32;
  int height = 32;
  std::string rgb_dir;
  int corpus_lattice_min_pow = 1;
  int corpus_lattice_max_pow = 5;

  dada::DadaConfig dada;
  dada::TrainHyper pretrain;
  pipeline::Stage2Config stage2;
  pipeline::Stage2Hyper train;

  // object-class data
  int train_count = 500;
  int test_normal = 50;
  int test_anomalous = 50;
  std::string data_dir;  // real class directory (train/ and test/), optional
  dataio::PreprocessConfig preprocess;

  double fpr_limit = 0.3;
  metrics::SweepMode sweep = metrics::SweepMode::exact;

  int bench_repetitions = 3;
  int bench_warmup = 1;
  int bench_threads = 1;

  RunConfig() {
    pretrain.iterations = 2000;
    pretrain.batch_size = 8;
    train.iterations = 2000;
    train.batch_size = 8;
  }

  /// Model settings after ablation switches are applied.
  dada::DadaConfig effective_dada() const {
    dada::DadaConfig d = dada;
    if (ablation.vqvae) d.grouped = false;
    if (ablation.weighted) {
      d.lambda_depth = 10.0;
      d.lambda_image = 1.0;
    }
    return d;
  }

  dataio::DepthMode depth_mode() const {
    if (ablation.no_perlin) return dataio::DepthMode::no_perlin;
    if (ablation.no_affine) return dataio::DepthMode::no_affine;
    return dataio::DepthMode::perlin_affine;
  }

  dataio::CorpusConfig corpus_config() const {
    dataio::CorpusConfig c;
    c.count = corpus_count;
    c.width = width;
    c.height = height;
    c.seed = dataio::derive_seed(seed, 1);
    c.rgb_dir = rgb_dir;
    c.depth_mode = depth_mode();
    c.lattice = {corpus_lattice_min_pow, corpus_lattice_max_pow};
    return c;
  }

  synth::ObjectDatasetConfig object_config() const {
    synth::ObjectDatasetConfig o;
    o.object.width = width;
    o.object.height = height;
    o.preprocess = preprocess;
    o.train_count = train_count;
    o.test_normal = test_normal;
    o.test_anomalous = test_anomalous;
    o.seed = dataio::derive_seed(seed, 2);
    return o;
  }

  dada::TrainHyper pretrain_hyper() const {
    dada::TrainHyper h = pretrain;
    h.seed = dataio::derive_seed(seed, 3);
    return h;
  }

  pipeline::Stage2Hyper train_hyper() const {
    pipeline::Stage2Hyper h = train;
    h.seed = dataio::derive_seed(seed, 4);
    return h;
  }

  std::uint64_t init_seed() const { return dataio::derive_seed(seed, 5); }

  void validate() const {
    if (ablation.no_perlin && ablation.no_affine)
      throw ConfigError("ablation.no_perlin and ablation.no_affine are mutually exclusive");
    if (width < 8 || height < 8 || width % 8 || height % 8)
      throw ConfigError("data.width and data.height must be positive multiples of 8");
    if (corpus_count < 0 || train_count < 0 || test_normal < 0 || test_anomalous < 0)
      throw ConfigError("sample counts must be >= 0");
    if (pretrain.iterations < 0 || train.iterations < 0 || pretrain.batch_size < 1 ||
        train.batch_size < 1)
      throw ConfigError("iteration counts must be >= 0 and batch sizes >= 1");
    if (!(pretrain.learning_rate >= 0.0) || !(train.learning_rate >= 0.0))
      throw ConfigError("learning rates must be >= 0");
    if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ConfigError("eval.fpr_limit must lie in (0,1]");
    if (bench_repetitions < 1 || bench_warmup < 0 || bench_threads < 1)
      throw ConfigError("bench settings out of range");
    if (preprocess.border_width < 1 || !(preprocess.tau > 0.0))
      throw ConfigError("preprocess.border_width must be >= 1 and preprocess.tau > 0");
    effective_dada().validate();
    stage2.validate();
  }

  KeyValues to_key_values() const {
    KeyValues kv = dada.to_key_values();
    for (auto& [k, v] : stage2.to_key_values()) kv[k] = v;
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    auto i = [](long long v) { return std::to_string(v); };
    kv["run.seed"] = std::to_string(seed);
    kv["ablation.no_perlin"] = b(ablation.no_perlin);
    kv["ablation.no_affine"] = b(ablation.no_affine);
    kv["ablation.vqvae"] = b(ablation.vqvae);
    kv["ablation.weighted"] = b(ablation.weighted);
    kv["corpus.count"] = i(corpus_count);
    kv["corpus.rgb_dir"] = rgb_dir;
    kv["corpus.lattice_min_pow"] = i(corpus_lattice_min_pow);
    kv["corpus.lattice_max_pow"] = i(corpus_lattice_max_pow);
    kv["data.width"] = i(width);
    kv["data.height"] = i(height);
    kv["data.train_count"] = i(train_count);
    kv["data.test_normal"] = i(test_normal);
    kv["data.test_anomalous"] = i(test_anomalous);
    kv["data.dir"] = data_dir;
    kv["pretrain.iterations"] = i(pretrain.iterations);
    kv["pretrain.batch_size"] = i(pretrain.batch_size);
    kv["pretrain.learning_rate"] = format_number(pretrain.learning_rate);
    kv["train.iterations"] = i(train.iterations);
    kv["train.batch_size"] = i(train.batch_size);
    kv["train.learning_rate"] = format_number(train.learning_rate);
    kv["preprocess.border_width"] = i(preprocess.border_width);
    kv["preprocess.tau"] = format_number(preprocess.tau);
    kv["preprocess.iterative_fill"] = b(preprocess.iterative_fill);
    kv["eval.fpr_limit"] = format_number(fpr_limit);
    kv["eval.sweep"] = sweep == metrics::SweepMode::exact ? "exact" : "binned";
    kv["bench.repetitions"] = i(bench_repetitions);
    kv["bench.warmup"] = i(bench_warmup);
    kv["bench.threads"] = i(bench_threads);
    return kv;
  }

  /// Overrides fields from kv. Unknown keys are rejected.
  void apply(const KeyValues& kv) {
    const KeyValues known = RunConfig().to_key_values();
    for (const auto& [k, v] : kv)
      if (!known.count(k)) throw ConfigError("unknown configuration key '" + k + "'");
    dada.apply(kv);
    stage2.apply(kv);
    auto get = [&](const char* key, auto&& set) {
      const auto it = kv.find(key);
      if (it != kv.end()) set(it->first, it->second);
    };
    auto as_int = [](int& dst) { return [&dst](const std::string& k, const std::string& v) { dst = static_cast<int>(parse_int(k, v)); }; };
    auto as_bool = [](bool& dst) { return [&dst](const std::string& k, const std::string& v) { dst = parse_bool(k, v); }; };
    auto as_double = [](double& dst) { return [&dst](const std::string& k, const std::string& v) { dst = parse_double(k, v); }; };
    auto as_string = [](std::string& dst) { return [&dst](const std::string&, const std::string& v) { dst = v; }; };
    get("run.seed", [&](const std::string& k, const std::string& v) {
      const long long s = parse_int(k, v);
      if (s < 0) throw ConfigError("key 'run.seed': must be >= 0");
      seed = static_cast<std::uint64_t>(s);
    });
    get("ablation.no_perlin", as_bool(ablation.no_perlin));
    get("ablation.no_affine", as_bool(ablation.no_affine));
    get("ablation.vqvae", as_bool(ablation.vqvae));
    get("ablation.weighted", as_bool(ablation.weighted));
    get("corpus.count", as_int(corpus_count));
    get("corpus.rgb_dir", as_string(rgb_dir));
    get("corpus.lattice_min_pow", as_int(corpus_lattice_min_pow));
    get("corpus.lattice_max_pow", as_int(corpus_lattice_max_pow));
    get("data.width", as_int(width));
    get("data.height", as_int(height));
    get("data.train_count", as_int(train_count));
    get("data.test_normal", as_int(test_normal));
    get("data.test_anomalous", as_int(test_anomalous));
    get("data.dir", as_string(data_dir));
    get("pretrain.iterations", as_int(pretrain.iterations));
    get("pretrain.batch_size", as_int(pretrain.batch_size));
    get("pretrain.learning_rate", as_double(pretrain.learning_rate));
    get("train.iterations", as_int(train.iterations));
    get("train.batch_size", as_int(train.batch_size));
    get("train.learning_rate", as_double(train.learning_rate));
    get("preprocess.border_width", as_int(preprocess.border_width));
    get("preprocess.tau", as_double(preprocess.tau));
    get("preprocess.iterative_fill", as_bool(preprocess.iterative_fill));
    get("eval.fpr_limit", as_double(fpr_limit));
    get("eval.sweep", [&](const std::string& k, const std::string& v) {
      if (v == "exact") sweep = metrics::SweepMode::exact;
      else if (v == "binned") sweep = metrics::SweepMode::binned;
      else throw ConfigError("key '" + k + "': expected exact or binned, got '" + v + "'");
    });
    get("bench.repetitions", as_int(bench_repetitions));
    get("bench.warmup", as_int(bench_warmup));
    get("bench.threads", as_int(bench_threads));
  }

  std::string snapshot() const { return format_key_values(to_key_values()); }

  void write_snapshot(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    const std::string path = (std::filesystem::path(dir) / "config.snapshot").string();
    std::ofstream out(path);
    if (!out) throw IoError(path, "cannot write config snapshot");
    out << snapshot();
  }
};

/// Defaults, then the file (if any), then `overrides`; validated.
inline RunConfig parse_config(const std::string& path, const KeyValues& overrides = {}) {
  RunConfig cfg;
  if (!path.empty()) cfg.apply(read_key_values(path));
  cfg.apply(overrides);
  cfg.validate();
  return cfg;
}

}  // namespace tdsr
