#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "contraseq/checkpoint.hpp"
#include "contraseq/eval.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace contraseq;
namespace fs = std::filesystem;

namespace {

ModelConfig eval_config(Family family, int64_t vocab, int64_t hidden = 8) {
  ModelConfig cfg;
  cfg.family = family;
  cfg.layers = 2;
  cfg.hidden = hidden;
  cfg.heads = 2;
  cfg.kernel = 3;
  cfg.tie_embeddings = true;
  cfg.src_vocab = vocab;
  cfg.tgt_vocab = vocab;
  cfg.max_length = 64;
  return cfg;
}

fs::path temp_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("contraseq_eval_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("score_sentence: zeroed output layer gives -|target'| ln V") {
  const int64_t v = 16;
  Model m = build_model(eval_config(Family::transformer, v), 1);
  for (auto& x : m.out_w.mutable_data()) x = 0.0f;
  for (auto& x : m.out_b.mutable_data()) x = 0.0f;
  const std::vector<int> tgt{4, 5, 6};
  const double lp = score_sentence(m, {7, 8}, tgt);
  CHECK(lp == doctest::Approx(-4.0 * std::log(16.0)).epsilon(1e-6));
}

TEST_CASE("score_sentence: equals the stepwise per-prefix oracle within 1e-5") {
  for (Family f : {Family::rnn, Family::cnn, Family::transformer, Family::trans_rnn}) {
    Model m = build_model(eval_config(f, 14), 23);
    RngStream rng(41, "score.stepwise");
    for (int trial = 0; trial < 4; ++trial) {
      std::vector<int> src, tgt;
      const int ns = 2 + static_cast<int>(rng.next_below(5));
      const int nt = 1 + static_cast<int>(rng.next_below(5));
      for (int i = 0; i < ns; ++i) src.push_back(4 + static_cast<int>(rng.next_below(10)));
      for (int i = 0; i < nt; ++i) tgt.push_back(4 + static_cast<int>(rng.next_below(10)));
      const double fused = score_sentence(m, src, tgt);
      const double stepwise = testing::score_sentence_stepwise(m, src, tgt);
      CHECK(std::abs(fused - stepwise) < 1e-5);
    }
  }
}

TEST_CASE("score_sentence: joint log-prob decreases as tokens are appended") {
  Model m = build_model(eval_config(Family::transformer, 14), 7);
  NoGradGuard no_grad;
  const std::vector<int> src{4, 5, 6};
  const std::vector<int> tgt{7, 8, 9, 10};
  Tensor logits = forward_teacher_forced(m, src, tgt);
  double cumulative = 0;
  for (size_t i = 0; i < tgt.size(); ++i) {
    const double lp = row_log_prob(logits.data(), static_cast<int64_t>(i), logits.dim(1), tgt[i]);
    CHECK(lp < 0.0);  // probability strictly below 1 at random init
    cumulative += lp;
  }
  CHECK(cumulative < 0.0);
  CHECK_THROWS_AS(score_sentence(m, src, {}), contract_error);
}

namespace {

// A model whose scores are fully controlled by the output bias: logits are
// constant across positions, so P(token) = softmax(bias)[token].
Model bias_only_model(const Vocabulary& vocab, const std::map<std::string, float>& bias) {
  Model m = build_model(eval_config(Family::transformer, vocab.size()), 3);
  for (auto& x : m.out_w.mutable_data()) x = 0.0f;
  for (auto& x : m.out_b.mutable_data()) x = 0.0f;
  for (const auto& [token, value] : bias) m.out_b.mutable_data()[vocab.id(token)] = value;
  return m;
}

std::vector<ContrastiveInstance> toy_instances() {
  std::vector<ContrastiveInstance> instances(3);
  instances[0] = {"i1", {"s"}, {"good1"}, {{"bad1"}}, 2, ""};
  instances[1] = {"i2", {"s"}, {"good2"}, {{"bad2"}, {"bad3"}}, 7, ""};
  instances[2] = {"i3", {"s"}, {"good3"}, {{"bad4"}}, 12, ""};
  return instances;
}

Vocabulary toy_vocab() {
  return Vocabulary::build({"s good1 good2 good3 bad1 bad2 bad3 bad4"}, 32);
}

}  // namespace

TEST_CASE("evaluate_contrastive: accuracies from a rigged bias model") {
  const Vocabulary vocab = toy_vocab();
  const auto instances = toy_instances();

  // Every reference wins.
  Model all_win = bias_only_model(
      vocab, {{"good1", 4.0f}, {"good2", 4.0f}, {"good3", 4.0f}});
  auto result = evaluate_contrastive(all_win, instances, vocab, vocab);
  CHECK(result.accuracy == 1.0);
  for (const auto& rec : result.records) CHECK(rec.correct);

  // Exact ties count as incorrect: all logits identical.
  Model tied = bias_only_model(vocab, {});
  auto tied_result = evaluate_contrastive(tied, instances, vocab, vocab);
  CHECK(tied_result.accuracy == 0.0);
  for (const auto& rec : tied_result.records) {
    CHECK_FALSE(rec.correct);
    for (double lp : rec.contrastive_logprobs) CHECK(lp == rec.ref_logprob);
  }

  // 2 of 3 correct -> 0.6667 within 1e-9.
  Model two_win = bias_only_model(vocab, {{"good1", 4.0f}, {"good2", 4.0f}, {"bad4", 4.0f}});
  auto two = evaluate_contrastive(two_win, instances, vocab, vocab);
  CHECK(two.accuracy == doctest::Approx(2.0 / 3.0).epsilon(1e-9));

  CHECK_THROWS_AS(evaluate_contrastive(all_win, {}, vocab, vocab), contract_error);
}

TEST_CASE("evaluate_contrastive: order-independent and thread-count invariant") {
  const Vocabulary vocab = toy_vocab();
  Model m = bias_only_model(vocab, {{"good1", 2.0f}, {"bad2", 1.0f}});
  auto instances = toy_instances();
  auto forward = evaluate_contrastive(m, instances, vocab, vocab, 1);
  std::reverse(instances.begin(), instances.end());
  auto reversed = evaluate_contrastive(m, instances, vocab, vocab, 1);
  auto threaded = evaluate_contrastive(m, instances, vocab, vocab, 3);
  for (const auto& rec : forward.records) {
    for (const auto& other : {&reversed, &threaded}) {
      bool found = false;
      for (const auto& cand : other->records) {
        if (cand.id != rec.id) continue;
        found = true;
        CHECK(cand.ref_logprob == rec.ref_logprob);
        CHECK(cand.contrastive_logprobs == rec.contrastive_logprobs);
        CHECK(cand.correct == rec.correct);
      }
      CHECK(found);
    }
  }
  CHECK(forward.accuracy == reversed.accuracy);
  CHECK(forward.accuracy == threaded.accuracy);
}

TEST_CASE("bucket_report: widths, long-range, partition") {
  std::vector<ScoreRecord> records;
  for (int d = 0; d < 15; ++d) {
    ScoreRecord r;
    r.id = "r" + std::to_string(d);
    r.distance = d;
    r.correct = d % 3 != 0;
    records.push_back(r);
  }
  BucketReport w1 = bucket_report(records, 1, 10);
  CHECK(w1.rows.size() == 15);  // width 1: each distance its own bucket
  int64_t total = 0;
  for (const auto& row : w1.rows) {
    CHECK(row.hi == row.lo + 1);
    total += row.n;
  }
  CHECK(total == 15);
  CHECK(w1.n_long == 4);  // distances 11..14

  BucketReport w5 = bucket_report(records, 5, 10);
  CHECK(w5.rows.size() == 3);
  int64_t total5 = 0;
  for (const auto& row : w5.rows) total5 += row.n;
  CHECK(total5 == 15);

  // All records at distance 12 with threshold 10: long-range == overall.
  std::vector<ScoreRecord> twelve;
  for (int i = 0; i < 8; ++i) {
    ScoreRecord r;
    r.id = "t" + std::to_string(i);
    r.distance = 12;
    r.correct = i % 2 == 0;
    twelve.push_back(r);
  }
  BucketReport rep12 = bucket_report(twelve, 1, 10);
  CHECK(rep12.long_range == rep12.overall);
  CHECK(rep12.n_long == 8);

  // Records without distance metadata are a contract violation.
  std::vector<ScoreRecord> sense(1);
  sense[0].id = "w";
  sense[0].sense = "n0.s1";
  CHECK_THROWS_AS(bucket_report(sense, 1, 10), contract_error);
  sense[0].correct = true;
  CHECK(overall_accuracy(sense) == 1.0);
}

TEST_CASE("corpus_bleu: endpoints and hand-counted oracle") {
  using Sent = std::vector<std::string>;
  const Sent ref{"a", "b", "c", "d", "f"};
  CHECK(corpus_bleu({ref}, {ref}) == doctest::Approx(1.0));

  // No 4-gram overlap anywhere -> 0.
  const Sent hyp_no4{"a", "x", "c", "y", "e"};
  CHECK(corpus_bleu({hyp_no4}, {ref}) == 0.0);

  // Clipped precisions 4/5, 3/4, 2/3, 1/2 -> geometric mean of 0.2, BP = 1.
  const Sent hyp{"a", "b", "c", "d", "e"};
  const double expected = std::pow((4.0 / 5.0) * (3.0 / 4.0) * (2.0 / 3.0) * (1.0 / 2.0), 0.25);
  CHECK(corpus_bleu({hyp}, {ref}) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(expected == doctest::Approx(0.66874).epsilon(1e-4));

  // Brevity penalty: short hypothesis with perfect available precisions.
  const Sent short_hyp{"a", "b"};
  const Sent long_ref{"a", "b", "c"};
  CHECK(corpus_bleu({short_hyp}, {long_ref}) ==
        doctest::Approx(std::exp(1.0 - 3.0 / 2.0)).epsilon(1e-9));

  CHECK_THROWS_AS(corpus_bleu({hyp, hyp}, {ref}), contract_error);
}

TEST_CASE("scores JSONL round-trips") {
  const fs::path dir = temp_dir("jsonl");
  std::vector<ScoreRecord> records(2);
  records[0] = {"a1", -3.25, {-4.5, -6.125}, true, 7, ""};
  records[1] = {"w1", -2.0, {-1.75}, false, std::nullopt, "n2.s0"};
  const std::string path = (dir / "scores.jsonl").string();
  write_scores_jsonl(path, records);
  auto loaded = read_scores_jsonl(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].id == "a1");
  CHECK(loaded[0].ref_logprob == -3.25);
  CHECK(loaded[0].contrastive_logprobs == records[0].contrastive_logprobs);
  CHECK(loaded[0].correct);
  CHECK(loaded[0].distance == 7);
  CHECK(loaded[1].sense == "n2.s0");
  CHECK_FALSE(loaded[1].distance.has_value());
}

TEST_CASE("checkpoint: save/load round-trips parameters bit-exactly, scores identical") {
  const fs::path dir = temp_dir("ckpt");
  for (Family f : {Family::rnn, Family::cnn, Family::transformer, Family::trans_rnn}) {
    Model m = build_model(eval_config(f, 12), 91);
    const std::string path = (dir / (family_name(f) + ".ckpt")).string();
    save_checkpoint(path, m);
    Model loaded = load_checkpoint(path);
    REQUIRE(loaded.params.size() == m.params.size());
    for (size_t i = 0; i < m.params.size(); ++i) {
      CHECK(loaded.params[i].first == m.params[i].first);
      CHECK(loaded.params[i].second.data() == m.params[i].second.data());  // bit-exact
    }
    const std::vector<int> src{4, 5, 6};
    const std::vector<int> tgt{7, 8};
    CHECK(score_sentence(loaded, src, tgt) == score_sentence(m, src, tgt));
  }
}

TEST_CASE("checkpoint: tied embeddings stored once and re-tied on load") {
  const fs::path dir = temp_dir("ckpt_tied");
  ModelConfig cfg = eval_config(Family::transformer, 12);
  cfg.tie_embeddings = true;
  Model m = build_model(cfg, 5);
  const std::string path = (dir / "tied.ckpt").string();
  save_checkpoint(path, m);
  Model loaded = load_checkpoint(path);
  CHECK(loaded.src_embed.node() == loaded.tgt_embed.node());
  CHECK(loaded.src_embed.data() == m.src_embed.data());
}

TEST_CASE("checkpoint: corrupted files are rejected") {
  const fs::path dir = temp_dir("ckpt_bad");
  const std::string path = (dir / "x.ckpt").string();
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTCSEQ garbage";
  }
  CHECK_THROWS_AS(load_checkpoint(path), parse_error);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), data_error);
}

TEST_CASE("scoring is reproducible: same shape, tolerance zero") {
  Model m = build_model(eval_config(Family::cnn, 12), 17);
  const std::vector<int> src{4, 5, 6, 7};
  const std::vector<int> tgt{8, 9, 10};
  const double a = score_sentence(m, src, tgt);
  const double b = score_sentence(m, src, tgt);
  CHECK(a == b);
}
