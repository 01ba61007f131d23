// End-to-end checks of the command-line front end. Every command runs as a
// subprocess on tiny datasets; outputs are parsed back from disk.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>
#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kCli = CORRPRUNE_CLI_PATH;

struct RunResult {
  int exit_code = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  static int counter = 0;
  const std::string log =
      "/tmp/corrprune_cli_log_" + std::to_string(counter++) + ".txt";
  const std::string cmd = kCli + " " + args + " > " + log + " 2>&1";
  const int rc = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  std::ifstream is(log);
  std::ostringstream ss;
  ss << is.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& stem) {
  fs::path p = fs::path("/tmp") / ("corrprune_cli_" + stem);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

size_t count_corrpairs(const fs::path& dir) {
  size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir))
    n += e.path().extension() == ".corrpairs";
  return n;
}

const std::string kTinyModel =
    " --d 16 --k 5,4 --clusters 4 --motion-iters 1 --heads 2";

}  // namespace

TEST_CASE("dataset generation writes the requested counts and a stable manifest") {
  const fs::path root = fresh_dir("gen");
  const std::string flags =
      " --pairs 6 --val-pairs 3 --test-pairs 2 --n 64 --outliers 0.25"
      " --noise 1e-3 --seed 11";
  RunResult a = run("gen --out " + (root / "a").string() + flags);
  INFO(a.out);
  REQUIRE(a.exit_code == 0);

  CHECK(count_corrpairs(root / "a" / "train") == 6);
  CHECK(count_corrpairs(root / "a" / "val") == 3);
  CHECK(count_corrpairs(root / "a" / "test") == 2);

  const json manifest = json::parse(slurp(root / "a" / "manifest.json"));
  CHECK(manifest.at("splits").at("train").at("count") == 6);
  CHECK(manifest.at("splits").at("val").at("count") == 3);
  CHECK(manifest.at("splits").at("test").at("count") == 2);
  CHECK(manifest.at("splits").at("train").at("files").size() == 6);
  CHECK(manifest.at("dataset_hash").get<std::string>().size() == 16);

  // Same seed reproduces every byte; a different seed changes the hash.
  REQUIRE(run("gen --out " + (root / "b").string() + flags).exit_code == 0);
  CHECK(slurp(root / "a" / "manifest.json") ==
        slurp(root / "b" / "manifest.json"));
  CHECK(slurp(root / "a" / "train" / "pair_0003.corrpairs") ==
        slurp(root / "b" / "train" / "pair_0003.corrpairs"));

  REQUIRE(run("gen --out " + (root / "c").string() +
              " --pairs 6 --val-pairs 3 --test-pairs 2 --n 64 --outliers 0.25"
              " --noise 1e-3 --seed 12")
              .exit_code == 0);
  const json other = json::parse(slurp(root / "c" / "manifest.json"));
  CHECK(manifest.at("dataset_hash") != other.at("dataset_hash"));
}

TEST_CASE("generated outlier fraction is binomial around the requested rate") {
  const fs::path root = fresh_dir("gen_stat");
  // Noise-free so no planned inlier can flip its label: the observed
  // outlier count is a sum of independent per-row draws at rate p.
  REQUIRE(run("gen --out " + root.string() +
              " --pairs 20 --val-pairs 0 --test-pairs 0 --n 256"
              " --outliers 0.4 --noise 0 --seed 4")
              .exit_code == 0);
  const json manifest = json::parse(slurp(root / "manifest.json"));
  const double obs = manifest.at("outlier_fraction_observed").get<double>();
  const double p = 0.4;
  const double rows = 20.0 * 256.0;
  const double sigma = std::sqrt(p * (1.0 - p) / rows);
  CHECK(std::abs(obs - p) <= 3.0 * sigma);
}

TEST_CASE("training and evaluation round trip through the command line") {
  const fs::path root = fresh_dir("pipeline");
  const fs::path data = root / "data";
  REQUIRE(run("gen --out " + data.string() +
              " --pairs 4 --val-pairs 2 --test-pairs 2 --n 64 --outliers 0.3"
              " --noise 1e-3 --seed 7")
              .exit_code == 0);

  const fs::path run_dir = root / "run";
  RunResult tr = run("train --data " + data.string() + " --out " +
                     run_dir.string() + " --steps 8 --batch 2 --seed 3" +
                     kTinyModel);
  INFO(tr.out);
  // The command itself fails unless the final loss beats the initial one.
  REQUIRE(tr.exit_code == 0);
  REQUIRE(fs::exists(run_dir / "model.ckpt"));
  REQUIRE(fs::exists(run_dir / "train_config.ini"));

  const std::string log = slurp(run_dir / "train_log.jsonl");
  CHECK(log.find("\"step\":1,") != std::string::npos);
  CHECK(log.find("\"loss_cls\":") != std::string::npos);
  CHECK(log.find("\"loss_reg\":") != std::string::npos);
  CHECK(log.find("\"loss_total\":") != std::string::npos);
  CHECK(log.find("\"epoch\":") != std::string::npos);

  const std::string eval_flags = " --data " + data.string() +
                                 " --checkpoint " +
                                 (run_dir / "model.ckpt").string() +
                                 " --split test --seed 3 --ransac-iters 200" +
                                 kTinyModel;
  RunResult ev = run("eval --out " + (root / "eval").string() + eval_flags +
                     " --baseline ransac");
  INFO(ev.out);
  REQUIRE(ev.exit_code == 0);

  const json report = json::parse(slurp(root / "eval" / "report.json"));
  REQUIRE(report.size() == 6);
  for (const char* key :
       {"precision", "recall", "fscore", "auc5", "auc10", "auc20"}) {
    REQUIRE(report.contains(key));
    const double v = report.at(key).get<double>();
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  const json base = json::parse(slurp(root / "eval" / "report_ransac.json"));
  CHECK(base.size() == 6);

  const std::string cdf = slurp(root / "eval" / "error_cdf.csv");
  CHECK(cdf.rfind("method,err_deg,cdf\n", 0) == 0);
  CHECK(cdf.find("\nmodel,") != std::string::npos);
  CHECK(cdf.find("\nransac,") != std::string::npos);

  // Re-running the evaluation reproduces the report byte for byte.
  REQUIRE(run("eval --out " + (root / "eval2").string() + eval_flags)
              .exit_code == 0);
  CHECK(slurp(root / "eval" / "report.json") ==
        slurp(root / "eval2" / "report.json"));

  // Oracle mode scores the labels against themselves: a perfect report.
  REQUIRE(run("eval --data " + data.string() + " --out " +
              (root / "oracle").string() + " --split test --oracle")
              .exit_code == 0);
  const json oracle = json::parse(slurp(root / "oracle" / "report.json"));
  REQUIRE(oracle.size() == 6);
  for (const auto& kv : oracle.items())
    CHECK(kv.value().get<double>() == 1.0);

  RunResult inf = run("infer --input " +
                      (data / "test" / "pair_0000.corrpairs").string() +
                      " --checkpoint " + (run_dir / "model.ckpt").string() +
                      " --out " + (root / "pred.json").string() + " --seed 3" +
                      kTinyModel);
  INFO(inf.out);
  REQUIRE(inf.exit_code == 0);
  const json pred = json::parse(slurp(root / "pred.json"));
  REQUIRE(pred.is_array());
  REQUIRE(pred.size() == 1);
  CHECK(pred[0].contains("pose_ok"));
  CHECK(pred[0].contains("kept"));
  CHECK(pred[0].contains("weights"));
  CHECK(pred[0].at("n") == 64);
}

TEST_CASE("attention benchmark emits the full kind-by-size grid") {
  const fs::path root = fresh_dir("bench");
  const fs::path csv_path = root / "bench.csv";
  RunResult b = run("bench-attn --out " + csv_path.string() +
                    " --sizes 64,128 --d 16 --runs 5");
  INFO(b.out);
  REQUIRE(b.exit_code == 0);

  std::istringstream is(slurp(csv_path));
  std::string line;
  REQUIRE(std::getline(is, line));
  CHECK(line == "kind,N,d,median_ms,p90_ms");
  std::vector<std::string> rows;
  while (std::getline(is, line))
    if (!line.empty()) rows.push_back(line);
  REQUIRE(rows.size() == 4);
  for (const char* prefix :
       {"flow,64,16,", "flow,128,16,", "dense,64,16,", "dense,128,16,"}) {
    bool found = false;
    for (const std::string& r : rows) found |= r.rfind(prefix, 0) == 0;
    CHECK(found);
  }
  for (const std::string& r : rows) {
    const size_t comma = r.rfind(',');
    CHECK(std::stod(r.substr(comma + 1)) > 0.0);
  }
}

TEST_CASE("bad invocations fail with a nonzero exit") {
  CHECK(run("").exit_code != 0);
  CHECK(run("gen --out /tmp/corrprune_cli_bad --no-such-flag").exit_code != 0);
  RunResult ev = run("eval --data /tmp --out /tmp/corrprune_cli_bad");
  CHECK(ev.exit_code == 1);
  CHECK(ev.out.find("--checkpoint") != std::string::npos);
  CHECK(run("train --data /no/such/dir --out /tmp/corrprune_cli_bad")
            .exit_code != 0);
}
