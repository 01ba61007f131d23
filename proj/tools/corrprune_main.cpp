// Command-line front end: dataset generation, training, evaluation, single
// file inference, and the attention microbenchmark. Every command is
// deterministic for a fixed --seed; benchmark timings are the one exception
// (the emitted schema is still fixed).

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <corrprune/attention.hpp>
#include <corrprune/corrfile.hpp>
#include <corrprune/model.hpp>
#include <corrprune/scene.hpp>
#include <corrprune/train.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace corrprune;

namespace {

uint64_t fnv1a(const std::string& bytes) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream os(path, std::ios::binary);
  CP_CHECK(os.good(), "cannot open '" << path << "' for writing");
  os << body;
  os.flush();
  CP_CHECK(os.good(), "write failed for '" << path << "'");
}

// Architecture flags shared by train, eval, and infer. The pruning depth is
// implied by the length of --k.
struct ModelCli {
  CorrAdaptorConfig cfg;
  std::string attention = "flow";
  std::vector<std::string> ablate;

  void attach(CLI::App* cmd) {
    cmd->add_option("--d", cfg.d, "feature channels")->capture_default_str();
    cmd->add_option("--k", cfg.k_per_block,
                    "neighbors per pruning block (comma separated)")
        ->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--clusters", cfg.clusters,
                    "soft-assignment cluster count")
        ->capture_default_str();
    cmd->add_option("--motion-iters", cfg.l_m,
                    "interaction iterations per branch")
        ->capture_default_str();
    cmd->add_option("--fusion-iters", cfg.l_fusion,
                    "dual-branch fusion iterations")
        ->capture_default_str();
    cmd->add_option("--heads", cfg.heads, "attention heads")
        ->capture_default_str();
    cmd->add_option("--alpha", cfg.alpha, "per-block keep ratio")
        ->capture_default_str();
    cmd->add_option("--lambda", cfg.lambda, "regression loss weight")
        ->capture_default_str();
    cmd->add_option("--attention", attention, "attention kind")
        ->check(CLI::IsMember({"flow", "plain"}))
        ->capture_default_str();
    cmd->add_option("--ablate", ablate,
                    "ablation switches (repeatable)")
        ->check(CLI::IsMember({"explicit-only", "implicit-only", "motion-off",
                               "shared-motion"}));
  }

  CorrAdaptorConfig build() const {
    CorrAdaptorConfig c = cfg;
    c.l_p = int64_t(c.k_per_block.size());
    c.plain_attention = attention == "plain";
    for (const std::string& a : ablate) {
      if (a == "explicit-only") c.explicit_only = true;
      if (a == "implicit-only") c.implicit_only = true;
      if (a == "motion-off") c.motion_off = true;
      if (a == "shared-motion") c.shared_motion = true;
    }
    c.validate();
    return c;
  }
};

struct GenArgs {
  std::string out;
  int64_t pairs = 200, val_pairs = 50, test_pairs = 50;
  int64_t n = 500;
  double outliers = 0.5;
  double noise = 1e-3;
  uint64_t seed = 0;
};

int run_gen(const GenArgs& a) {
  CP_CHECK(a.pairs >= 1, "gen: --pairs must be >= 1");
  CP_CHECK(a.val_pairs >= 0 && a.test_pairs >= 0,
           "gen: split sizes must be >= 0");
  fs::create_directories(a.out);
  json manifest;
  manifest["command"] = "gen";
  manifest["n"] = a.n;
  manifest["outlier_rate"] = a.outliers;
  manifest["noise_sigma"] = a.noise;
  manifest["seed"] = a.seed;

  struct Split {
    const char* name;
    uint64_t tag;
    int64_t count;
  };
  const Split splits[] = {
      {"train", 1, a.pairs}, {"val", 2, a.val_pairs}, {"test", 3, a.test_pairs}};

  uint64_t dataset_hash = 1469598103934665603ull;
  size_t observed_outliers = 0, observed_rows = 0;
  for (const Split& sp : splits) {
    if (sp.count > 0) fs::create_directories(fs::path(a.out) / sp.name);
    json files = json::array();
    for (int64_t i = 0; i < sp.count; ++i) {
      uint64_t pair_seed =
          splitmix64(a.seed ^ splitmix64((sp.tag << 32) | uint64_t(i)));
      ScenePair scene = synth_scene(a.n, a.outliers, a.noise, pair_seed);
      for (uint8_t l : scene.labels) {
        observed_outliers += l == 0;
        ++observed_rows;
      }
      std::ostringstream ss;
      write_corrpairs(ss, scene.correspondences, &scene.pose, &scene.labels);
      const std::string bytes = ss.str();
      char name[48];
      std::snprintf(name, sizeof name, "pair_%04lld.corrpairs",
                    static_cast<long long>(i));
      write_text((fs::path(a.out) / sp.name / name).string(), bytes);
      uint64_t h = fnv1a(bytes);
      dataset_hash = fnv1a(hex64(dataset_hash) + hex64(h));
      files.push_back({{"name", name}, {"fnv1a", hex64(h)}});
    }
    manifest["splits"][sp.name] = {{"count", sp.count}, {"files", files}};
  }
  manifest["outlier_fraction_observed"] =
      observed_rows ? double(observed_outliers) / double(observed_rows) : 0.0;
  manifest["dataset_hash"] = hex64(dataset_hash);
  write_text((fs::path(a.out) / "manifest.json").string(),
             manifest.dump(2) + "\n");
  std::printf("gen: wrote %lld train / %lld val / %lld test pairs to %s\n",
              static_cast<long long>(a.pairs),
              static_cast<long long>(a.val_pairs),
              static_cast<long long>(a.test_pairs), a.out.c_str());
  return 0;
}

struct TrainArgs {
  std::string data, out;
  int64_t steps = 2000, batch = 8, n_virtual = 100;
  double lr = 1e-3, warmup = 0.1;
  uint64_t seed = 0;
  std::string val_pose = "weighted";
  int ransac_iters = 1000;
};

int run_train(const TrainArgs& a, const ModelCli& mc, const std::string& record) {
  CorrAdaptorConfig cfg = mc.build();
  fs::create_directories(a.out);
  std::vector<CorrRecord> train_set =
      load_pairs((fs::path(a.data) / "train").string());
  std::vector<CorrRecord> val_set;
  const fs::path val_dir = fs::path(a.data) / "val";
  bool have_val = false;
  if (fs::is_directory(val_dir))
    for (const auto& e : fs::directory_iterator(val_dir))
      have_val |= e.path().extension() == ".corrpairs";
  if (have_val) val_set = load_pairs(val_dir.string());

  CorrAdaptor model(cfg, a.seed);
  TrainConfig tc;
  tc.steps = a.steps;
  tc.batch = a.batch;
  tc.lr = a.lr;
  tc.warmup_frac = a.warmup;
  tc.n_virtual = a.n_virtual;
  tc.seed = a.seed;
  tc.log_path = (fs::path(a.out) / "train_log.jsonl").string();
  tc.checkpoint_path = (fs::path(a.out) / "model.ckpt").string();
  tc.val.pose =
      a.val_pose == "ransac" ? PoseSource::ransac : PoseSource::weighted;
  tc.val.ransac_iters = a.ransac_iters;
  tc.val.seed = a.seed;

  TrainResult res = train_model(model, train_set, val_set, tc);
  write_text((fs::path(a.out) / "train_config.ini").string(), record);
  std::printf("train: %lld steps, loss %.6f -> %.6f, checkpoint %s\n",
              static_cast<long long>(a.steps), res.initial_loss,
              res.final_loss, tc.checkpoint_path.c_str());
  CP_CHECK(res.final_loss < res.initial_loss,
           "training did not reduce the loss (" << res.initial_loss << " -> "
                                                << res.final_loss << ")");
  return 0;
}

struct EvalArgs {
  std::string data, checkpoint, out, split = "test";
  std::string pose = "ransac";
  int ransac_iters = 1000;
  double tau = 1e-4;
  uint64_t seed = 0;
  std::string baseline;  // "ransac" enables the no-model baseline
  bool oracle = false;
};

json report_json(const MetricsReport& rep) {
  json j;
  j["precision"] = rep.precision;
  j["recall"] = rep.recall;
  j["fscore"] = rep.fscore;
  j["auc5"] = rep.auc.at(5);
  j["auc10"] = rep.auc.at(10);
  j["auc20"] = rep.auc.at(20);
  return j;
}

void append_cdf_rows(std::string& csv, const std::string& method,
                     const MetricsReport& rep) {
  std::vector<double> errs;
  for (const auto& row : rep.rows) errs.push_back(row.pose_err_deg);
  std::sort(errs.begin(), errs.end());
  for (size_t i = 0; i < errs.size(); ++i) {
    char line[96];
    std::snprintf(line, sizeof line, "%s,%.17g,%.17g\n", method.c_str(),
                  errs[i], double(i + 1) / double(errs.size()));
    csv += line;
  }
}

void append_pair_rows(std::string& csv, const std::string& method,
                      const MetricsReport& rep) {
  for (size_t i = 0; i < rep.rows.size(); ++i) {
    const PairMetrics& r = rep.rows[i];
    char line[160];
    std::snprintf(line, sizeof line, "%s,%zu,%.17g,%.17g,%.17g,%.17g,%d\n",
                  method.c_str(), i, r.precision, r.recall, r.fscore,
                  r.pose_err_deg, r.pose_ok ? 1 : 0);
    csv += line;
  }
}

int run_eval(const EvalArgs& a, const ModelCli& mc) {
  CP_CHECK(a.oracle || !a.checkpoint.empty(),
           "eval needs --checkpoint (or --oracle)");
  fs::create_directories(a.out);
  fs::path split_path = fs::path(a.data) / a.split;
  std::vector<CorrRecord> recs =
      load_pairs(fs::exists(split_path) ? split_path.string() : a.data);

  EvalOptions opt;
  opt.pose = a.pose == "weighted" ? PoseSource::weighted : PoseSource::ransac;
  opt.ransac_iters = a.ransac_iters;
  opt.tau = a.tau;
  opt.seed = a.seed;

  MetricsReport rep;
  if (a.oracle) {
    // Labels stand in for predictions: a plumbing check whose report must
    // come out perfect by construction.
    for (const CorrRecord& r : recs) {
      CP_CHECK(r.has_labels, "oracle mode needs labeled pairs");
      Prf prf = prf_metrics(r.labels, r.labels);
      PairMetrics pm;
      pm.precision = prf.precision;
      pm.recall = prf.recall;
      pm.fscore = prf.fscore;
      pm.pose_err_deg = 0.0;
      pm.pose_ok = true;
      rep.precision += pm.precision;
      rep.recall += pm.recall;
      rep.fscore += pm.fscore;
      rep.rows.push_back(pm);
    }
    const double inv = 1.0 / double(recs.size());
    rep.precision *= inv;
    rep.recall *= inv;
    rep.fscore *= inv;
    rep.auc = pose_auc(std::vector<double>(recs.size(), 0.0), opt.thresholds);
  } else {
    CorrAdaptorConfig cfg = mc.build();
    CorrAdaptor model(cfg, a.seed);
    ParamMap params;
    model.collect(params);
    load_into(a.checkpoint, params);
    rep = evaluate_records(model, recs, opt);
  }

  write_text((fs::path(a.out) / "report.json").string(),
             report_json(rep).dump(2) + "\n");
  std::string cdf = "method,err_deg,cdf\n";
  std::string pairs = "method,pair,precision,recall,fscore,pose_err_deg,pose_ok\n";
  const char* method = a.oracle ? "oracle" : "model";
  append_cdf_rows(cdf, method, rep);
  append_pair_rows(pairs, method, rep);

  if (a.baseline == "ransac") {
    MetricsReport base = evaluate_ransac_records(recs, opt);
    write_text((fs::path(a.out) / "report_ransac.json").string(),
               report_json(base).dump(2) + "\n");
    append_cdf_rows(cdf, "ransac", base);
    append_pair_rows(pairs, "ransac", base);
    std::printf("eval[ransac]: P=%.4f R=%.4f F=%.4f auc5=%.4f\n",
                base.precision, base.recall, base.fscore, base.auc.at(5));
  }
  write_text((fs::path(a.out) / "error_cdf.csv").string(), cdf);
  write_text((fs::path(a.out) / "pairs.csv").string(), pairs);
  std::printf("eval[%s]: P=%.4f R=%.4f F=%.4f auc5=%.4f auc10=%.4f auc20=%.4f\n",
              method, rep.precision, rep.recall, rep.fscore, rep.auc.at(5),
              rep.auc.at(10), rep.auc.at(20));
  return 0;
}

struct InferArgs {
  std::string input, checkpoint, out;
  uint64_t seed = 0;
};

int run_infer(const InferArgs& a, const ModelCli& mc) {
  CorrAdaptorConfig cfg = mc.build();
  CorrAdaptor model(cfg, a.seed);
  ParamMap params;
  model.collect(params);
  load_into(a.checkpoint, params);

  std::vector<CorrRecord> recs = load_pairs(a.input);
  json out = json::array();
  NoGradGuard ng;
  for (const CorrRecord& rec : recs) {
    json j;
    j["n"] = rec.correspondences.size();
    try {
      ModelOutput mo = model.forward(rec.correspondences, /*training=*/false);
      j["pose_ok"] = mo.pose_ok;
      j["kept"] = mo.final_idx;
      std::vector<double> w(static_cast<size_t>(mo.final_weights.numel()));
      std::copy(mo.final_weights.data(),
                mo.final_weights.data() + mo.final_weights.numel(), w.begin());
      j["weights"] = w;
      if (mo.pose_ok) {
        j["essential"] = std::vector<double>(mo.e_hat.e.m, mo.e_hat.e.m + 9);
        j["inliers"] = mo.inlier_mask;
      }
    } catch (const Error& e) {
      j["pose_ok"] = false;
      j["error"] = e.what();
    }
    out.push_back(j);
  }
  write_text(a.out, out.dump(2) + "\n");
  std::printf("infer: %zu record(s) -> %s\n", recs.size(), a.out.c_str());
  return 0;
}

struct BenchArgs {
  std::string out;
  std::vector<int64_t> sizes = {1024, 4096, 16384};
  int64_t d = 128;
  int runs = 5;
  uint64_t seed = 99;
};

int run_bench(const BenchArgs& a) {
  CP_CHECK(a.runs >= 5, "bench-attn: need at least 5 runs for a median");
  std::string csv = "kind,N,d,median_ms,p90_ms\n";
  for (AttentionKind kind : {AttentionKind::flow, AttentionKind::dense}) {
    for (int64_t n : a.sizes) {
      BenchResult b = bench_attention(kind, n, a.d, a.runs, a.seed);
      char line[96];
      std::snprintf(line, sizeof line, "%s,%lld,%lld,%.3f,%.3f\n",
                    kind == AttentionKind::flow ? "flow" : "dense",
                    static_cast<long long>(n), static_cast<long long>(a.d),
                    b.median_ms, b.p90_ms);
      csv += line;
      std::fputs(line, stdout);
    }
  }
  if (!a.out.empty()) write_text(a.out, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"correspondence pruning pipeline"};
  app.require_subcommand(1);
  app.set_config("--config", "", "read options from an INI file");
  app.allow_config_extras(false);

  GenArgs ga;
  CLI::App* gen = app.add_subcommand("gen", "generate synthetic dataset splits");
  gen->add_option("--out", ga.out, "output directory")->required();
  gen->add_option("--pairs", ga.pairs, "training pairs")->capture_default_str();
  gen->add_option("--val-pairs", ga.val_pairs, "validation pairs")
      ->capture_default_str();
  gen->add_option("--test-pairs", ga.test_pairs, "test pairs")
      ->capture_default_str();
  gen->add_option("--n", ga.n, "correspondences per pair")
      ->capture_default_str();
  gen->add_option("--outliers", ga.outliers, "outlier rate in [0,1)")
      ->capture_default_str();
  gen->add_option("--noise", ga.noise, "coordinate noise sigma")
      ->capture_default_str();
  gen->add_option("--seed", ga.seed, "master seed")->capture_default_str();

  TrainArgs ta;
  ModelCli tmc;
  CLI::App* train = app.add_subcommand("train", "train on a generated dataset");
  train->add_option("--data", ta.data, "dataset directory")->required();
  train->add_option("--out", ta.out, "output directory")->required();
  train->add_option("--steps", ta.steps, "optimization steps")
      ->capture_default_str();
  train->add_option("--batch", ta.batch, "pairs per step")
      ->capture_default_str();
  train->add_option("--lr", ta.lr, "learning rate")->capture_default_str();
  train->add_option("--warmup", ta.warmup,
                    "fraction of steps with zero regression weight")
      ->capture_default_str();
  train->add_option("--n-virtual", ta.n_virtual,
                    "virtual pairs in the regression term")
      ->capture_default_str();
  train->add_option("--seed", ta.seed, "master seed")->capture_default_str();
  train->add_option("--val-pose", ta.val_pose, "validation pose source")
      ->check(CLI::IsMember({"weighted", "ransac"}))
      ->capture_default_str();
  train->add_option("--ransac-iters", ta.ransac_iters,
                    "iterations for the ransac pose source")
      ->capture_default_str();
  tmc.attach(train);

  EvalArgs ea;
  ModelCli emc;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--data", ea.data, "dataset directory or corrpairs path")
      ->required();
  eval->add_option("--checkpoint", ea.checkpoint, "checkpoint file");
  eval->add_option("--out", ea.out, "output directory")->required();
  eval->add_option("--split", ea.split, "dataset split subdirectory")
      ->capture_default_str();
  eval->add_option("--pose", ea.pose, "pose source")
      ->check(CLI::IsMember({"weighted", "ransac"}))
      ->capture_default_str();
  eval->add_option("--ransac-iters", ea.ransac_iters, "robust fit iterations")
      ->capture_default_str();
  eval->add_option("--tau", ea.tau, "inlier threshold")->capture_default_str();
  eval->add_option("--seed", ea.seed, "master seed")->capture_default_str();
  eval->add_option("--baseline", ea.baseline, "also evaluate a baseline")
      ->check(CLI::IsMember({"ransac"}));
  eval->add_flag("--oracle", ea.oracle,
                 "score the ground-truth labels as predictions");
  emc.attach(eval);

  InferArgs ia;
  ModelCli imc;
  CLI::App* infer = app.add_subcommand("infer", "run a checkpoint on one file");
  infer->add_option("--input", ia.input, "corrpairs file or directory")
      ->required();
  infer->add_option("--checkpoint", ia.checkpoint, "checkpoint file")
      ->required();
  infer->add_option("--out", ia.out, "output JSON path")->required();
  infer->add_option("--seed", ia.seed, "master seed")->capture_default_str();
  imc.attach(infer);

  BenchArgs ba;
  CLI::App* bench = app.add_subcommand("bench-attn",
                                       "time flow vs dense attention");
  bench->add_option("--out", ba.out, "CSV output path");
  bench->add_option("--sizes", ba.sizes, "row counts (comma separated)")
      ->delimiter(',')
      ->capture_default_str();
  bench->add_option("--d", ba.d, "feature channels")->capture_default_str();
  bench->add_option("--runs", ba.runs, "timed runs per cell")
      ->capture_default_str();
  bench->add_option("--seed", ba.seed, "input seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_gen(ga);
    if (train->parsed())
      return run_train(ta, tmc, train->config_to_str(true, true));
    if (eval->parsed()) return run_eval(ea, emc);
    if (infer->parsed()) return run_infer(ia, imc);
    if (bench->parsed()) return run_bench(ba);
  } catch (const Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "corrprune: %s\n", e.what());
    return 1;
  }
  return 2;
}
