#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "contraseq/cli.hpp"
#include "contraseq/data.hpp"
#include "contraseq/eval.hpp"

using namespace contraseq;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("contraseq_cli_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

int cli(std::vector<std::string> args) { return run_cli(args); }

// One tiny end-to-end run: generate, train, score, eval. Returns the run dir.
fs::path tiny_pipeline(const std::string& tag, const std::string& seed) {
  const fs::path root = temp_dir(tag);
  const auto data = (root / "data").string();
  const auto run = (root / "run").string();
  REQUIRE(cli({"generate", "--out", data, "--task", "agreement", "--seed", seed,
               "--train_count", "40", "--dev_count", "12", "--test_count", "16",
               "--d_min", "1", "--d_max", "4", "--n_subjects", "2", "--n_fillers", "8",
               "--n_verbs", "2", "--prefix_max", "1"}) == 0);
  REQUIRE(cli({"train", "--data", data, "--out", run, "--family", "transformer",
               "--layers", "1", "--hidden", "8", "--heads", "2", "--max_updates", "6",
               "--checkpoint_every", "3", "--batch_tokens", "256", "--lr", "0.005",
               "--seed", seed, "--dropout_embed", "0.05", "--dropout_block", "0.05"}) == 0);
  REQUIRE(cli({"score", "--model", run + "/best.ckpt", "--vocab_src", run + "/vocab.src",
               "--vocab_tgt", run + "/vocab.tgt", "--set", data + "/test.tsv",
               "--out", run}) == 0);
  REQUIRE(cli({"eval", "--scores", run + "/scores.jsonl", "--out", run,
               "--bucket_width", "1", "--long_threshold", "2"}) == 0);
  return root;
}

}  // namespace

TEST_CASE("cli: exit codes for bad invocations") {
  const fs::path dir = temp_dir("codes");
  CHECK(cli({}) == 2);
  CHECK(cli({"frobnicate"}) == 2);
  CHECK(cli({"generate", "--out", (dir / "g").string(), "--no_such_key", "1"}) == 2);
  CHECK(cli({"generate", "--out", (dir / "g2").string(), "--d_min", "banana"}) == 2);
  CHECK(cli({"generate"}) == 2);  // missing out
  // Missing input files.
  CHECK(cli({"train", "--data", (dir / "nowhere").string(), "--out", (dir / "r").string()}) == 3);
  CHECK(cli({"eval", "--scores", (dir / "absent.jsonl").string(), "--out",
             (dir / "e").string()}) == 3);
  CHECK(cli({"score", "--model", (dir / "no.ckpt").string(), "--vocab_src", "x",
             "--vocab_tgt", "y", "--set", "z", "--out", (dir / "s").string()}) == 3);
}

TEST_CASE("cli generate: outputs, manifest, loadable artifacts") {
  const fs::path dir = temp_dir("generate");
  const auto out = (dir / "data").string();
  REQUIRE(cli({"generate", "--out", out, "--task", "agreement", "--seed", "5",
               "--train_count", "30", "--dev_count", "10", "--test_count", "12",
               "--d_min", "0", "--d_max", "3"}) == 0);
  for (const char* name : {"train.src", "train.tgt", "dev.src", "dev.tgt", "test.tsv",
                           "manifest.txt"})
    CHECK(fs::exists(fs::path(out) / name));

  const auto corpus = load_parallel(out + "/train.src", out + "/train.tgt");
  CHECK(corpus.size() == 30);
  const auto instances = load_contrastive_tsv(out + "/test.tsv");
  CHECK(instances.size() == 12);

  const std::string manifest = slurp(fs::path(out) / "manifest.txt");
  CHECK(manifest.find("command=generate") != std::string::npos);
  CHECK(manifest.find("seed=5") != std::string::npos);
  CHECK(manifest.find("d_max=3") != std::string::npos);
  CHECK(manifest.find("input_hash=") != std::string::npos);
}

TEST_CASE("cli: config file plus overrides, later wins") {
  const fs::path dir = temp_dir("config");
  const auto cfg_path = (dir / "run.cfg").string();
  {
    std::ofstream cfg(cfg_path);
    cfg << "# comment line\n";
    cfg << "task=agreement\n";
    cfg << "d_max=4\n";
    cfg << "train_count=20\n";
    cfg << "dev_count=5\n";
    cfg << "test_count=5\n";
    cfg << "seed=9\n";
  }
  const auto out = (dir / "data").string();
  REQUIRE(cli({"generate", "--config", cfg_path, "--out", out, "--d_max", "6"}) == 0);
  const std::string manifest = slurp(fs::path(out) / "manifest.txt");
  CHECK(manifest.find("d_max=6") != std::string::npos);  // override beat the file
  CHECK(manifest.find("train_count=20") != std::string::npos);
}

TEST_CASE("cli: full pipeline runs and is byte-deterministic") {
  const fs::path a = tiny_pipeline("pipe_a", "11");
  const fs::path b = tiny_pipeline("pipe_b", "11");
  CHECK(slurp(a / "run" / "report.csv") == slurp(b / "run" / "report.csv"));
  CHECK(slurp(a / "run" / "scores.jsonl") == slurp(b / "run" / "scores.jsonl"));
  CHECK(slurp(a / "run" / "metrics.csv") == slurp(b / "run" / "metrics.csv"));
  CHECK(slurp(a / "run" / "best.ckpt") == slurp(b / "run" / "best.ckpt"));
  CHECK(slurp(a / "data" / "train.src") == slurp(b / "data" / "train.src"));

  // A different seed changes the outputs.
  const fs::path c = tiny_pipeline("pipe_c", "12");
  CHECK(slurp(a / "run" / "scores.jsonl") != slurp(c / "run" / "scores.jsonl"));

  // Pieces of the report: header + bucket rows + overall + long_range.
  const std::string report = slurp(a / "run" / "report.csv");
  CHECK(report.rfind("bucket_min,bucket_max,n,n_correct,accuracy\n", 0) == 0);
  CHECK(report.find("overall,,") != std::string::npos);
  CHECK(report.find("long_range,,") != std::string::npos);

  // metrics.csv carries the documented header.
  CHECK(slurp(a / "run" / "metrics.csv").rfind("step,loss,dev_ppl,lr\n", 0) == 0);
}

TEST_CASE("cli eval: accuracy row is 1.0 when the reference always wins") {
  const fs::path dir = temp_dir("eval_perfect");
  std::vector<ScoreRecord> records;
  for (int i = 0; i < 5; ++i) {
    ScoreRecord r;
    r.id = "i" + std::to_string(i);
    r.ref_logprob = -1.0;
    r.contrastive_logprobs = {-2.0, -3.0};
    r.correct = true;
    r.distance = i + 1;
    records.push_back(r);
  }
  const auto scores = (dir / "scores.jsonl").string();
  write_scores_jsonl(scores, records);
  const auto out = (dir / "eval").string();
  REQUIRE(cli({"eval", "--scores", scores, "--out", out}) == 0);
  const std::string report = slurp(fs::path(out) / "report.csv");
  CHECK(report.find("overall,,5,5,1.000000") != std::string::npos);
}

TEST_CASE("cli eval: sense sets produce an overall-only report") {
  const fs::path dir = temp_dir("eval_sense");
  std::vector<ScoreRecord> records(4);
  for (int i = 0; i < 4; ++i) {
    records[i].id = "w" + std::to_string(i);
    records[i].sense = "n0.s" + std::to_string(i % 2);
    records[i].correct = i < 3;
    records[i].ref_logprob = -1;
    records[i].contrastive_logprobs = {-2};
  }
  const auto scores = (dir / "scores.jsonl").string();
  write_scores_jsonl(scores, records);
  const auto out = (dir / "eval").string();
  REQUIRE(cli({"eval", "--scores", scores, "--out", out}) == 0);
  const std::string report = slurp(fs::path(out) / "report.csv");
  CHECK(report.find("overall,,4,3,0.750000") != std::string::npos);
  CHECK(report.find("long_range") == std::string::npos);
}

TEST_CASE("cli report: joins eval CSVs into aligned accuracy columns") {
  const fs::path dir = temp_dir("report");
  auto write_report = [&](const std::string& name, double acc_scale) {
    BucketReport rep;
    for (int b = 0; b < 3; ++b) {
      BucketReport::Row row;
      row.lo = b * 2;
      row.hi = row.lo + 2;
      row.n = 10;
      row.n_correct = static_cast<int64_t>(10 * acc_scale) - b;
      row.accuracy = (10.0 * acc_scale - b) / 10.0;
      rep.rows.push_back(row);
      rep.n_total += row.n;
      rep.n_correct += row.n_correct;
    }
    rep.overall = static_cast<double>(rep.n_correct) / static_cast<double>(rep.n_total);
    rep.n_long = 10;
    rep.n_long_correct = static_cast<int64_t>(10 * acc_scale) - 2;
    rep.long_range = rep.n_long_correct / 10.0;
    const auto path = (dir / name).string();
    write_report_csv(path, rep);
    return path;
  };
  const auto r1 = write_report("rnn.csv", 0.9);
  const auto r2 = write_report("cnn.csv", 0.6);
  const auto r3 = write_report("transformer.csv", 1.0);
  const auto out = (dir / "merged").string();
  REQUIRE(cli({"report", "--inputs", r1 + "," + r2 + "," + r3, "--labels",
               "rnn,cnn,transformer", "--out", out}) == 0);
  const std::string merged = slurp(fs::path(out) / "report.csv");
  CHECK(merged.rfind("bucket_min,bucket_max,rnn,cnn,transformer\n", 0) == 0);
  // Three accuracy columns per bucket row, aligned on (lo, hi).
  CHECK(merged.find("0,2,0.900000,0.600000,1.000000") != std::string::npos);
  CHECK(merged.find("2,4,0.800000,0.500000,0.900000") != std::string::npos);
  CHECK(merged.find("overall,") != std::string::npos);
  CHECK(merged.find("long_range,") != std::string::npos);
}

TEST_CASE("cli: wsd task generates and scores end to end") {
  const fs::path root = temp_dir("wsd");
  const auto data = (root / "data").string();
  const auto run = (root / "run").string();
  REQUIRE(cli({"generate", "--out", data, "--task", "wsd", "--seed", "3",
               "--train_count", "30", "--dev_count", "8", "--test_count", "10",
               "--d_min", "0", "--d_max", "2", "--sense_counts", "2,3"}) == 0);
  REQUIRE(cli({"train", "--data", data, "--out", run, "--family", "transformer",
               "--layers", "1", "--hidden", "8", "--heads", "2", "--max_updates", "4",
               "--checkpoint_every", "2", "--batch_tokens", "256", "--lr", "0.005",
               "--seed", "3"}) == 0);
  REQUIRE(cli({"score", "--model", run + "/best.ckpt", "--vocab_src", run + "/vocab.src",
               "--vocab_tgt", run + "/vocab.tgt", "--set", data + "/test.tsv",
               "--out", run}) == 0);
  REQUIRE(cli({"eval", "--scores", run + "/scores.jsonl", "--out", run}) == 0);
  const std::string report = slurp(fs::path(run) / "report.csv");
  CHECK(report.find("overall,,10,") != std::string::npos);
}
