#pragma once

// Stage runners shared by the command-line tool and the acceptance suite,
// and the end-to-end experiment:
//
//   <out>/config.snapshot
//   <out>/corpus/pretrain, corpus/train, corpus/test
//   <out>/checkpoints/dada.ckpt, checkpoints/3dsr.ckpt
//   <out>/predictions/scores.jsonl, predictions/masks/<id>.tiff
//   <out>/report.json

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "tdsr/config.hpp"
#include "tdsr/ingest.hpp"

namespace tdsr::experiment {

namespace fs = std::filesystem;
using Json = nlohmann::json;
using Logger = std::function<void(const std::string&)>;
using Scalar = float;

/// Failure of one chained stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

inline void quiet(const std::string&) {}

template <typename F>
auto run_stage(const std::string& name, const Logger& log, F&& f) {
  log("[" + name + "]");
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

inline void write_json(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw IoError(path, "cannot open for writing");
  out << j.dump(2) << '\n';
}

inline Json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open");
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw IoError(path, e.what());
  }
}

// ---- stages --------------------------------------------------------------------------

inline void build_corpus(const RunConfig& cfg, const std::string& dir) {
  dataio::write_dataset(dir, dataio::build_synthetic_corpus(cfg.corpus_config()));
}

/// Object-class train/test splits: ingested from cfg.data_dir when set,
/// otherwise the procedural object class.
inline void build_object_data(const RunConfig& cfg, const std::string& train_dir,
                              const std::string& test_dir) {
  if (!cfg.data_dir.empty()) {
    const std::string root = resolve_data_path(cfg.data_dir);
    dataio::IngestOptions opt;
    opt.width = cfg.width;
    opt.height = cfg.height;
    opt.preprocess = cfg.preprocess;
    dataio::write_dataset(train_dir, dataio::ingest_split((fs::path(root) / "train").string(), opt));
    dataio::write_dataset(test_dir, dataio::ingest_split((fs::path(root) / "test").string(), opt));
    return;
  }
  const auto d = synth::build_object_datasets(cfg.object_config());
  dataio::write_dataset(train_dir, d.train);
  dataio::write_dataset(test_dir, d.test);
}

inline Tensor<Scalar> stack_inputs(const std::vector<RgbdSample>& samples) {
  std::vector<const RgbdSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return dada::to_input<Scalar>(std::span<const RgbdSample* const>(ptrs));
}

inline dada::TrainLog pretrain(const RunConfig& cfg, const std::string& corpus_dir,
                               const std::string& ckpt, const Logger& log = quiet) {
  const auto samples = dataio::samples_of(dataio::load_dataset(corpus_dir));
  if (samples.empty()) throw ArgumentError("pretraining corpus '" + corpus_dir + "' is empty");
  dada::DadaModel<Scalar> model(cfg.effective_dada());
  Rng rng(cfg.init_seed());
  model.init(rng);
  const auto result = dada::train_stage1(model, stack_inputs(samples), cfg.pretrain_hyper(),
                                         [&](int it, const dada::LossTerms& t) {
                                           log("  iter " + std::to_string(it) + " " + t.str());
                                         });
  fs::create_directories(fs::path(ckpt).parent_path());
  dada::save_checkpoint(ckpt, model);
  return result;
}

inline pipeline::Stage2Log train(const RunConfig& cfg, const std::string& dada_ckpt,
                                 const std::string& train_dir, const std::string& ckpt,
                                 const Logger& log = quiet) {
  if (!fs::exists(dada_ckpt))
    throw ConfigError("pretrained DADA checkpoint '" + dada_ckpt + "' not found");
  if (!fs::exists(fs::path(train_dir) / dataio::kManifestName))
    throw ConfigError("training dataset '" + train_dir + "' not found");
  auto dada_model = dada::load_checkpoint<Scalar>(dada_ckpt);
  const auto samples = dataio::samples_of(dataio::load_dataset(train_dir));
  pipeline::StageTwoModel<Scalar> model(std::move(dada_model), cfg.stage2);
  Rng rng(dataio::derive_seed(cfg.init_seed(), 1));
  model.init(rng);
  const auto result = pipeline::train_stage2(model, samples, cfg.train_hyper(),
                                             [&](int it, const pipeline::Stage2Terms& t) {
                                               log("  iter " + std::to_string(it) + " " + t.str());
                                             });
  fs::create_directories(fs::path(ckpt).parent_path());
  pipeline::save_checkpoint(ckpt, model);
  return result;
}

/// Writes predictions/scores.jsonl and one float mask per sample.
inline void infer(const std::string& ckpt, const std::string& data_dir, const std::string& pred_dir) {
  const auto model = pipeline::load_checkpoint<Scalar>(ckpt);
  const auto records = dataio::load_dataset(data_dir);
  std::vector<RgbdSample> samples;
  for (const auto& r : records) samples.push_back(r.sample);
  const auto results = pipeline::detect_all(*model, samples);
  fs::create_directories(fs::path(pred_dir) / "masks");
  std::vector<Json> lines;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string mask = "masks/" + samples[i].id + ".tiff";
    io::write_float_raster((fs::path(pred_dir) / mask).string(), results[i].mask);
    lines.push_back({{"id", samples[i].id},
                     {"label", to_string(samples[i].label)},
                     {"score", results[i].image_score},
                     {"mask", mask}});
  }
  dataio::write_manifest((fs::path(pred_dir) / "scores.jsonl").string(), lines);
}

/// Scores and masks from a predictions directory against a dataset's labels
/// and ground truth. Samples without a mask count as all-normal pixels.
inline metrics::EvalReport evaluate(const std::string& pred_dir, const std::string& data_dir,
                                    double fpr_limit, metrics::SweepMode mode) {
  const auto records = dataio::load_dataset(data_dir);
  std::map<std::string, const RgbdSample*> by_id;
  for (const auto& r : records) by_id[r.sample.id] = &r.sample;
  std::vector<metrics::ImageResult> images;
  std::vector<Grid<double>> maps;
  std::vector<BinaryMask> gts;
  for (const Json& j : dataio::read_manifest((fs::path(pred_dir) / "scores.jsonl").string())) {
    const std::string id = j.at("id").get<std::string>();
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw IoError(pred_dir, "prediction for unknown sample '" + id + "'");
    const RgbdSample& s = *it->second;
    images.push_back({id, s.label, j.at("score").get<double>()});
    maps.push_back(io::read_float_raster((fs::path(pred_dir) / j.at("mask").get<std::string>()).string()));
    gts.push_back(s.gt_mask ? *s.gt_mask : BinaryMask(s.width(), s.height(), 0));
  }
  return metrics::evaluate(std::move(images), maps, gts, fpr_limit, mode);
}

inline metrics::BenchReport bench(const std::string& ckpt, const std::string& data_dir,
                                  int repetitions, int warmup, int threads, int min_inferences = 100) {
  const auto model = pipeline::load_checkpoint<Scalar>(ckpt);
  auto samples = dataio::samples_of(dataio::load_dataset(data_dir));
  if (samples.empty()) throw ArgumentError("empty benchmark: no samples in '" + data_dir + "'");
  // Cycle the dataset so every timed pass covers at least min_inferences.
  const std::size_t base = samples.size();
  while (samples.size() < static_cast<std::size_t>(min_inferences))
    samples.push_back(samples[samples.size() % base]);
  std::vector<Tensor<Scalar>> inputs;
  for (const auto& s : samples) inputs.push_back(dada::to_input<Scalar>(s));
  const double sigma = model->config().sigma;
  return metrics::fps_bench(
      [&](std::size_t i) {
        const auto t = pipeline::detect_batch(*model, inputs[i]);
        (void)pipeline::score_batch(t.m_out, sigma);
      },
      samples.size(), samples.front().width(), samples.front().height(), repetitions, warmup,
      threads);
}

// ---- end to end ------------------------------------------------------------------------

struct Paths {
  fs::path root;
  std::string corpus() const { return (root / "corpus" / "pretrain").string(); }
  std::string train() const { return (root / "corpus" / "train").string(); }
  std::string test() const { return (root / "corpus" / "test").string(); }
  std::string dada_ckpt() const { return (root / "checkpoints" / "dada.ckpt").string(); }
  std::string model_ckpt() const { return (root / "checkpoints" / "3dsr.ckpt").string(); }
  std::string predictions() const { return (root / "predictions").string(); }
  std::string report() const { return (root / "report.json").string(); }
};

struct ExperimentOptions {
  bool bench = true;
};

/// build-corpus -> pretrain -> train -> infer -> eval -> bench.
inline metrics::EvalReport run_experiment(const RunConfig& cfg, const std::string& out,
                                          const Logger& log = quiet,
                                          const ExperimentOptions& opt = {}) {
  cfg.validate();
  if (!cfg.data_dir.empty() && !fs::is_directory(resolve_data_path(cfg.data_dir)))
    throw ConfigError("data.dir '" + cfg.data_dir + "' is not a directory");
  const Paths p{out};
  fs::create_directories(p.root);
  cfg.write_snapshot(p.root.string());
  using clock = std::chrono::steady_clock;
  Json timing = Json::object();
  auto timed = [&](const std::string& name, auto&& f) {
    const auto t0 = clock::now();
    run_stage(name, log, f);
    timing[name + "_seconds"] = std::chrono::duration<double>(clock::now() - t0).count();
  };
  Json extra = Json::object();
  timed("build-corpus", [&] {
    build_corpus(cfg, p.corpus());
    build_object_data(cfg, p.train(), p.test());
  });
  timed("pretrain", [&] {
    const auto r = pretrain(cfg, p.corpus(), p.dada_ckpt(), log);
    if (!r.curve.empty()) {
      extra["pretrain_first_loss"] = r.curve.front().total;
      extra["pretrain_last_loss"] = r.curve.back().total;
    }
  });
  timed("train", [&] {
    const auto r = train(cfg, p.dada_ckpt(), p.train(), p.model_ckpt(), log);
    if (!r.curve.empty()) {
      extra["train_first_loss"] = r.curve.front().total;
      extra["train_last_loss"] = r.curve.back().total;
    }
  });
  timed("infer", [&] { infer(p.model_ckpt(), p.test(), p.predictions()); });
  metrics::EvalReport report;
  timed("eval", [&] { report = evaluate(p.predictions(), p.test(), cfg.fpr_limit, cfg.sweep); });
  if (opt.bench)
    timed("bench", [&] {
      const auto b = bench(p.model_ckpt(), p.test(), cfg.bench_repetitions, cfg.bench_warmup,
                           cfg.bench_threads);
      timing["bench"] = b.to_json();
    });
  report.config = Json::object();
  for (const auto& [k, v] : cfg.to_key_values()) report.config[k] = v;
  report.timing = timing;
  report.extra = extra;
  write_json(p.report(), report.to_json());
  log("I-AUROC " + format_number(report.i_auroc) + "  P-AUROC " + format_number(report.p_auroc) +
      "  AUPRO " + format_number(report.aupro));
  return report;
}

// ---- ablations ---------------------------------------------------------------------------

struct Variant {
  std::string name;
  Ablations flags;
};

inline std::vector<Variant> standard_variants() {
  return {{"full", {}},
          {"no_affine", {false, true, false, false}},
          {"no_perlin", {true, false, false, false}},
          {"vqvae", {false, false, true, false}},
          {"weighted", {false, false, false, true}}};
}

inline Variant variant_by_name(const std::string& name) {
  for (const auto& v : standard_variants())
    if (v.name == name) return v;
  throw ConfigError("unknown ablation variant '" + name + "'");
}

/// One experiment per (variant, seed) under <out>/<variant>/seed<k>.
inline std::map<std::string, std::vector<metrics::EvalReport>> run_ablation_matrix(
    const RunConfig& base, const std::vector<Variant>& variants,
    const std::vector<std::uint64_t>& seeds, const std::string& out, const Logger& log = quiet,
    const ExperimentOptions& opt = {}) {
  std::map<std::string, std::vector<metrics::EvalReport>> reports;
  for (const auto& v : variants)
    for (const auto seed : seeds) {
      RunConfig cfg = base;
      cfg.ablation = v.flags;
      cfg.seed = seed;
      log("== " + v.name + " seed " + std::to_string(seed));
      reports[v.name].push_back(run_experiment(
          cfg, (fs::path(out) / v.name / ("seed" + std::to_string(seed))).string(), log, opt));
    }
  return reports;
}

}  // namespace tdsr::experiment
