// tdsr: command-line entry point for data generation, training, inference,
// evaluation and end-to-end experiments.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "tdsr/experiment.hpp"

namespace fs = std::filesystem;
using namespace tdsr;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  long long seed = -1;
  int log_every = 0;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Configuration file (section.key = value)");
  app->add_option("--set", c.overrides, "Override one key, e.g. --set train.iterations=500");
  app->add_option("--seed", c.seed, "Run seed (overrides run.seed)")->check(CLI::NonNegativeNumber);
  app->add_option("--log-every", c.log_every, "Print training losses every N iterations");
}

RunConfig resolve(const Common& c) {
  KeyValues kv;
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    kv[trim(o.substr(0, eq))] = trim(o.substr(eq + 1));
  }
  if (c.seed >= 0) kv["run.seed"] = std::to_string(c.seed);
  RunConfig cfg = parse_config(c.config, kv);
  cfg.pretrain.log_every = c.log_every;
  cfg.train.log_every = c.log_every;
  return cfg;
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

std::string parent_dir(const std::string& file) {
  const fs::path p = fs::path(file).parent_path();
  return p.empty() ? "." : p.string();
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3DSR RGB-D surface anomaly detection"};
  app.require_subcommand(1);

  // simulate
  Common sim_c;
  std::string sim_out;
  int sim_count = 16;
  auto* sim = app.add_subcommand("simulate", "Write simulated depth images and anomaly masks");
  add_common(sim, sim_c);
  sim->add_option("--out", sim_out, "Output directory")->required();
  sim->add_option("--count", sim_count, "Number of samples")->check(CLI::NonNegativeNumber);

  // build-corpus
  Common corpus_c;
  std::string corpus_out;
  auto* corpus = app.add_subcommand("build-corpus", "Build the DADA pretraining corpus");
  add_common(corpus, corpus_c);
  corpus->add_option("--out", corpus_out, "Output dataset directory")->required();

  // ingest
  Common ingest_c;
  std::string ingest_class, ingest_out;
  int ingest_limit = 0;
  auto* ingest = app.add_subcommand("ingest", "Convert one MVTec3D-style class into datasets");
  add_common(ingest, ingest_c);
  ingest->add_option("--class-dir", ingest_class,
                     "Class directory with train/ and test/ (relative paths fall back to $" +
                         std::string(kDataRootEnv) + ")")
      ->required();
  ingest->add_option("--out", ingest_out, "Output directory (gets train/ and test/)")->required();
  ingest->add_option("--limit", ingest_limit, "Maximum samples per defect directory");

  // preprocess
  Common pre_c;
  std::string pre_in, pre_out, pre_kind = "good";
  auto* pre = app.add_subcommand("preprocess", "Preprocess a directory of rgb/ and xyz/ files");
  add_common(pre, pre_c);
  pre->add_option("--in", pre_in, "Directory with rgb/ and xyz/")->required();
  pre->add_option("--out", pre_out, "Output dataset directory")->required();
  pre->add_option("--kind", pre_kind, "Defect type of the directory ('good' = normal)");

  // pretrain
  Common pt_c;
  std::string pt_corpus, pt_out;
  auto* pt = app.add_subcommand("pretrain", "Train DADA on a pretraining corpus");
  add_common(pt, pt_c);
  pt->add_option("--corpus", pt_corpus, "Corpus dataset directory")->required();
  pt->add_option("--out", pt_out, "Checkpoint path")->required();

  // train
  Common tr_c;
  std::string tr_dada, tr_data, tr_out;
  auto* tr = app.add_subcommand("train", "Train the detection stage on normal object data");
  add_common(tr, tr_c);
  tr->add_option("--dada", tr_dada, "Pretrained DADA checkpoint")->required();
  tr->add_option("--data", tr_data, "Training dataset directory")->required();
  tr->add_option("--out", tr_out, "Checkpoint path")->required();

  // infer
  std::string inf_model, inf_data, inf_out;
  auto* inf = app.add_subcommand("infer", "Write anomaly scores and masks");
  inf->add_option("--model", inf_model, "3DSR checkpoint")->required();
  inf->add_option("--data", inf_data, "Dataset directory")->required();
  inf->add_option("--out", inf_out, "Predictions directory")->required();

  // eval
  Common ev_c;
  std::string ev_pred, ev_data, ev_out;
  auto* ev = app.add_subcommand("eval", "Compute I-AUROC, P-AUROC and AUPRO");
  add_common(ev, ev_c);
  ev->add_option("--predictions", ev_pred, "Predictions directory")->required();
  ev->add_option("--data", ev_data, "Dataset directory with labels and ground truth")->required();
  ev->add_option("--out", ev_out, "Report path (printed when omitted)");

  // bench
  Common bn_c;
  std::string bn_model, bn_data, bn_out;
  auto* bn = app.add_subcommand("bench", "Measure inference throughput");
  add_common(bn, bn_c);
  bn->add_option("--model", bn_model, "3DSR checkpoint")->required();
  bn->add_option("--data", bn_data, "Dataset directory")->required();
  bn->add_option("--out", bn_out, "Report path (printed when omitted)");

  // experiment
  Common ex_c;
  std::string ex_out;
  std::vector<std::string> ex_variants;
  std::vector<std::uint64_t> ex_seeds;
  bool ex_no_bench = false;
  auto* ex = app.add_subcommand("experiment", "Run corpus, pretraining, training, inference, evaluation and benchmark");
  add_common(ex, ex_c);
  ex->add_option("--out", ex_out, "Artifacts directory")->required();
  ex->add_option("--variants", ex_variants,
                 "Ablation matrix: full, no_affine, no_perlin, vqvae, weighted");
  ex->add_option("--seeds", ex_seeds, "Seeds for the ablation matrix");
  ex->add_flag("--no-bench", ex_no_bench, "Skip the throughput benchmark");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sim) {
      const RunConfig cfg = resolve(sim_c);
      std::vector<nlohmann::json> lines;
      char id[32];
      for (int i = 0; i < sim_count; ++i) {
        std::snprintf(id, sizeof id, "sim_%06d", i);
        const std::uint64_t s = dataio::derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
        Rng r(s);
        const depthsim::LatticeRange lattice{cfg.corpus_lattice_min_pow, cfg.corpus_lattice_max_pow};
        const auto field = depthsim::sample_perlin(cfg.width, cfg.height, lattice, r);
        const auto params = depthsim::sample_depth_params(r);
        const DepthImage depth = depthsim::simulate_depth(field, params);
        const auto mask = depthsim::generate_anomaly_mask(cfg.width, cfg.height, cfg.stage2.mask_threshold, r,
                                                          nullptr, cfg.stage2.lattice());
        const std::string depth_path = std::string("depth/") + id + ".tiff";
        const std::string mask_path = std::string("masks/") + id + ".tiff";
        io::write_float_raster((fs::path(sim_out) / depth_path).string(), depth.depth);
        io::write_mask((fs::path(sim_out) / mask_path).string(), mask.mask);
        lines.push_back({{"id", id}, {"seed", s}, {"depth", depth_path}, {"mask", mask_path},
                         {"alpha", params.alpha}, {"beta", params.beta},
                         {"lattice_x", field.lattice_x}, {"lattice_y", field.lattice_y},
                         {"mask_coverage", mask.coverage}});
      }
      dataio::write_manifest((fs::path(sim_out) / dataio::kManifestName).string(), lines);
      cfg.write_snapshot(sim_out);
    } else if (*corpus) {
      const RunConfig cfg = resolve(corpus_c);
      experiment::build_corpus(cfg, corpus_out);
      cfg.write_snapshot(corpus_out);
    } else if (*ingest) {
      const RunConfig cfg = resolve(ingest_c);
      dataio::IngestOptions opt;
      opt.width = cfg.width;
      opt.height = cfg.height;
      opt.limit = ingest_limit;
      opt.preprocess = cfg.preprocess;
      const fs::path root = resolve_data_path(ingest_class);
      for (const char* split : {"train", "test"}) {
        const auto records = dataio::ingest_split((root / split).string(), opt);
        dataio::write_dataset((fs::path(ingest_out) / split).string(), records);
        log_line(std::string(split) + ": " + std::to_string(records.size()) + " samples");
      }
      cfg.write_snapshot(ingest_out);
    } else if (*pre) {
      const RunConfig cfg = resolve(pre_c);
      dataio::IngestOptions opt;
      opt.width = cfg.width;
      opt.height = cfg.height;
      opt.preprocess = cfg.preprocess;
      dataio::write_dataset(pre_out, dataio::ingest_directory(resolve_data_path(pre_in), pre_kind, opt));
      cfg.write_snapshot(pre_out);
    } else if (*pt) {
      const RunConfig cfg = resolve(pt_c);
      cfg.write_snapshot(parent_dir(pt_out));
      experiment::pretrain(cfg, pt_corpus, pt_out, log_line);
    } else if (*tr) {
      const RunConfig cfg = resolve(tr_c);
      cfg.write_snapshot(parent_dir(tr_out));
      experiment::train(cfg, tr_dada, tr_data, tr_out, log_line);
    } else if (*inf) {
      experiment::infer(inf_model, inf_data, inf_out);
    } else if (*ev) {
      const RunConfig cfg = resolve(ev_c);
      const auto report = experiment::evaluate(ev_pred, ev_data, cfg.fpr_limit, cfg.sweep);
      if (ev_out.empty()) print_json(report.to_json());
      else experiment::write_json(ev_out, report.to_json());
    } else if (*bn) {
      const RunConfig cfg = resolve(bn_c);
      const auto report = experiment::bench(bn_model, bn_data, cfg.bench_repetitions,
                                            cfg.bench_warmup, cfg.bench_threads);
      if (bn_out.empty()) print_json(report.to_json());
      else experiment::write_json(bn_out, report.to_json());
    } else if (*ex) {
      const RunConfig cfg = resolve(ex_c);
      experiment::ExperimentOptions opt;
      opt.bench = !ex_no_bench;
      if (ex_variants.empty() && ex_seeds.empty()) {
        experiment::run_experiment(cfg, ex_out, log_line, opt);
      } else {
        std::vector<experiment::Variant> variants;
        for (const auto& v : ex_variants) variants.push_back(experiment::variant_by_name(v));
        if (variants.empty()) variants.push_back(experiment::variant_by_name("full"));
        if (ex_seeds.empty()) ex_seeds.push_back(cfg.seed);
        const auto reports = experiment::run_ablation_matrix(cfg, variants, ex_seeds, ex_out, log_line, opt);
        nlohmann::json summary = nlohmann::json::object();
        for (const auto& [name, rs] : reports) {
          double sum = 0.0;
          for (const auto& r : rs) sum += r.i_auroc;
          summary[name] = {{"mean_i_auroc", sum / static_cast<double>(rs.size())},
                           {"runs", static_cast<int>(rs.size())}};
        }
        experiment::write_json((fs::path(ex_out) / "ablation.json").string(), summary);
        print_json(summary);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
