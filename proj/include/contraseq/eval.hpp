#pragma once

// Conditional scoring P(T|S), contrastive accuracy, distance-bucketed
// reporting and a plain corpus BLEU for sanity comparisons.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "contraseq/data.hpp"
#include "contraseq/model.hpp"

namespace contraseq {

// Sum of per-token log-probabilities of the EOS-suffixed target under one
// teacher-forced forward pass, in eval mode (dropout off). `target` is the
// raw sentence without EOS.
double score_sentence(const Model& model, const std::vector<int>& source,
                      const std::vector<int>& target);

// log P(target[row]) for one logits row, accumulated in double.
double row_log_prob(const std::vector<float>& logits, int64_t row, int64_t vocab, int token);

struct ScoreRecord {
  std::string id;
  double ref_logprob = 0;
  std::vector<double> contrastive_logprobs;
  bool correct = false;  // reference strictly above every contrastive score
  std::optional<int64_t> distance;
  std::string sense;
};

struct ContrastiveEvalResult {
  std::vector<ScoreRecord> records;
  double accuracy = 0;
};

// Scores every instance (fanning out over `threads` workers; results are
// identical for any thread count). Ties count as incorrect.
ContrastiveEvalResult evaluate_contrastive(const Model& model,
                                           const std::vector<ContrastiveInstance>& instances,
                                           const Vocabulary& src_vocab,
                                           const Vocabulary& tgt_vocab, int threads = 1);

struct BucketReport {
  struct Row {
    int64_t lo = 0, hi = 0;  // [lo, hi)
    int64_t n = 0, n_correct = 0;
    double accuracy = 0;
  };
  std::vector<Row> rows;
  int64_t n_total = 0, n_correct = 0;
  double overall = 0;
  int64_t long_threshold = 10;
  int64_t n_long = 0, n_long_correct = 0;
  double long_range = 0;
};

// Bins records by distance into [b, b+width); long-range accuracy covers
// distance > long_threshold. Records without distance metadata are a
// contract violation (sense sets use overall accuracy only).
BucketReport bucket_report(const std::vector<ScoreRecord>& records, int64_t bucket_width,
                           int64_t long_threshold = 10);

// Accuracy over all records, for sets without distance metadata.
double overall_accuracy(const std::vector<ScoreRecord>& records);

// Geometric mean of clipped n-gram precisions times the brevity penalty,
// in [0, 1]. Returns 0 if any counted precision is 0.
double corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references, int max_n = 4);

// Per-instance JSON-lines dump (id, ref_logprob, contrastive_logprobs,
// correct, distance/sense).
void write_scores_jsonl(const std::string& path, const std::vector<ScoreRecord>& records);
std::vector<ScoreRecord> read_scores_jsonl(const std::string& path);

// Report CSV: bucket rows plus trailing `overall` and `long_range` rows.
void write_report_csv(const std::string& path, const BucketReport& report);

}  // namespace contraseq
