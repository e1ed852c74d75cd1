#include "contraseq/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include <json.hpp>

#include "contraseq/threading.hpp"

namespace contraseq {

double row_log_prob(const std::vector<float>& logits, int64_t row, int64_t vocab, int token) {
  const float* r = logits.data() + row * vocab;
  float mx = r[0];
  for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, r[c]);
  double z = 0;
  for (int64_t c = 0; c < vocab; ++c) z += std::exp(static_cast<double>(r[c]) - mx);
  return static_cast<double>(r[token]) - (static_cast<double>(mx) + std::log(z));
}

double score_sentence(const Model& model, const std::vector<int>& source,
                      const std::vector<int>& target) {
  if (target.empty()) throw contract_error("score_sentence: empty target");
  NoGradGuard no_grad;
  std::vector<int> suffixed(target);
  suffixed.push_back(kEosId);
  Tensor logits = forward_teacher_forced(model, source, suffixed, RunMode{});
  const int64_t v = logits.dim(1);
  double total = 0;
  for (size_t i = 0; i < suffixed.size(); ++i)
    total += row_log_prob(logits.data(), static_cast<int64_t>(i), v, suffixed[i]);
  return total;
}

ContrastiveEvalResult evaluate_contrastive(const Model& model,
                                           const std::vector<ContrastiveInstance>& instances,
                                           const Vocabulary& src_vocab,
                                           const Vocabulary& tgt_vocab, int threads) {
  if (instances.empty()) throw contract_error("evaluate_contrastive: no instances");
  ContrastiveEvalResult result;
  result.records.resize(instances.size());
  parallel_for(static_cast<int64_t>(instances.size()), threads, [&](int64_t i) {
    const ContrastiveInstance& inst = instances[static_cast<size_t>(i)];
    if (inst.contrastive.empty())
      throw data_error("instance " + inst.id + " has no contrastive variants");
    ScoreRecord rec;
    rec.id = inst.id;
    rec.distance = inst.distance;
    rec.sense = inst.sense;
    const std::vector<int> src = src_vocab.encode(inst.source);
    rec.ref_logprob = score_sentence(model, src, tgt_vocab.encode(inst.reference));
    rec.correct = true;
    for (const auto& variant : inst.contrastive) {
      const double lp = score_sentence(model, src, tgt_vocab.encode(variant));
      rec.contrastive_logprobs.push_back(lp);
      // Strict inequality: a tie counts as incorrect.
      if (!(rec.ref_logprob > lp)) rec.correct = false;
    }
    result.records[static_cast<size_t>(i)] = std::move(rec);
  });
  int64_t n_correct = 0;
  for (const auto& r : result.records) n_correct += r.correct ? 1 : 0;
  result.accuracy = static_cast<double>(n_correct) / static_cast<double>(instances.size());
  return result;
}

double overall_accuracy(const std::vector<ScoreRecord>& records) {
  if (records.empty()) throw contract_error("overall_accuracy: no records");
  int64_t correct = 0;
  for (const auto& r : records) correct += r.correct ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

BucketReport bucket_report(const std::vector<ScoreRecord>& records, int64_t bucket_width,
                           int64_t long_threshold) {
  if (records.empty()) throw contract_error("bucket_report: no records");
  if (bucket_width < 1)
    throw config_error("bucket_report: width must be >= 1, got " + std::to_string(bucket_width));
  std::map<int64_t, std::pair<int64_t, int64_t>> buckets;  // lo -> (n, n_correct)
  BucketReport report;
  report.long_threshold = long_threshold;
  for (const auto& r : records) {
    if (!r.distance)
      throw contract_error("bucket_report: record " + r.id + " has no distance metadata");
    const int64_t lo = (*r.distance / bucket_width) * bucket_width;
    auto& [n, nc] = buckets[lo];
    ++n;
    nc += r.correct ? 1 : 0;
    ++report.n_total;
    report.n_correct += r.correct ? 1 : 0;
    if (*r.distance > long_threshold) {
      ++report.n_long;
      report.n_long_correct += r.correct ? 1 : 0;
    }
  }
  for (const auto& [lo, counts] : buckets) {
    BucketReport::Row row;
    row.lo = lo;
    row.hi = lo + bucket_width;
    row.n = counts.first;
    row.n_correct = counts.second;
    row.accuracy = static_cast<double>(counts.second) / static_cast<double>(counts.first);
    report.rows.push_back(row);
  }
  report.overall = static_cast<double>(report.n_correct) / static_cast<double>(report.n_total);
  report.long_range = report.n_long > 0 ? static_cast<double>(report.n_long_correct) /
                                              static_cast<double>(report.n_long)
                                        : 0.0;
  return report;
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

double corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references, int max_n) {
  if (hypotheses.size() != references.size())
    throw contract_error("corpus_bleu: " + std::to_string(hypotheses.size()) +
                         " hypotheses vs " + std::to_string(references.size()) + " references");
  if (hypotheses.empty()) throw contract_error("corpus_bleu: empty corpus");
  if (max_n < 1) throw config_error("corpus_bleu: max_n must be >= 1");

  auto ngram_counts = [](const std::vector<std::string>& toks, int n) {
    std::map<std::string, int64_t> counts;
    if (static_cast<int>(toks.size()) >= n) {
      for (size_t i = 0; i + n <= toks.size(); ++i) {
        std::string key;
        for (int j = 0; j < n; ++j) key += toks[i + j] + '\x1f';
        ++counts[key];
      }
    }
    return counts;
  };

  int64_t hyp_len = 0, ref_len = 0;
  std::vector<int64_t> matched(static_cast<size_t>(max_n), 0);
  std::vector<int64_t> total(static_cast<size_t>(max_n), 0);
  for (size_t s = 0; s < hypotheses.size(); ++s) {
    hyp_len += static_cast<int64_t>(hypotheses[s].size());
    ref_len += static_cast<int64_t>(references[s].size());
    for (int n = 1; n <= max_n; ++n) {
      const auto hyp = ngram_counts(hypotheses[s], n);
      const auto ref = ngram_counts(references[s], n);
      for (const auto& [gram, count] : hyp) {
        total[n - 1] += count;
        auto it = ref.find(gram);
        if (it != ref.end()) matched[n - 1] += std::min(count, it->second);
      }
    }
  }

  // Orders with no n-grams at all (corpus shorter than n) are skipped so a
  // perfect short corpus still scores 1.0; an order with zero matches makes
  // the whole score 0.
  double log_sum = 0;
  int used = 0;
  for (int n = 1; n <= max_n; ++n) {
    if (total[n - 1] == 0) continue;
    if (matched[n - 1] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched[n - 1]) / static_cast<double>(total[n - 1]));
    ++used;
  }
  if (used == 0) return 0.0;
  const double precision = std::exp(log_sum / used);
  const double bp =
      hyp_len >= ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return precision * bp;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

void write_scores_jsonl(const std::string& path, const std::vector<ScoreRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write file: " + path);
  for (const auto& r : records) {
    nlohmann::json j;
    j["id"] = r.id;
    j["ref_logprob"] = r.ref_logprob;
    j["contrastive_logprobs"] = r.contrastive_logprobs;
    j["correct"] = r.correct;
    if (r.distance) j["distance"] = *r.distance;
    if (!r.sense.empty()) j["sense"] = r.sense;
    out << j.dump() << '\n';
  }
}

std::vector<ScoreRecord> read_scores_jsonl(const std::string& path) {
  std::vector<ScoreRecord> records;
  const auto lines = read_lines(path);
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::exception& e) {
      throw parse_error(path + ":" + std::to_string(i + 1) + ": " + e.what());
    }
    ScoreRecord r;
    r.id = j.at("id").get<std::string>();
    r.ref_logprob = j.at("ref_logprob").get<double>();
    r.contrastive_logprobs = j.at("contrastive_logprobs").get<std::vector<double>>();
    r.correct = j.at("correct").get<bool>();
    if (j.contains("distance")) r.distance = j["distance"].get<int64_t>();
    if (j.contains("sense")) r.sense = j["sense"].get<std::string>();
    records.push_back(std::move(r));
  }
  return records;
}

void write_report_csv(const std::string& path, const BucketReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write file: " + path);
  char buf[128];
  out << "bucket_min,bucket_max,n,n_correct,accuracy\n";
  for (const auto& row : report.rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%lld,%lld,%.6f\n",
                  static_cast<long long>(row.lo), static_cast<long long>(row.hi),
                  static_cast<long long>(row.n), static_cast<long long>(row.n_correct),
                  row.accuracy);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "overall,,%lld,%lld,%.6f\n",
                static_cast<long long>(report.n_total), static_cast<long long>(report.n_correct),
                report.overall);
  out << buf;
  if (report.n_long > 0) {
    std::snprintf(buf, sizeof(buf), "long_range,,%lld,%lld,%.6f\n",
                  static_cast<long long>(report.n_long),
                  static_cast<long long>(report.n_long_correct), report.long_range);
    out << buf;
  }
}

}  // namespace contraseq
