#pragma once

// Test-only oracles and conveniences. These deliberately avoid the library's
// scoring path: score_sentence_stepwise re-derives P(T|S) from |T| prefix
// forward passes and is used to validate the single teacher-forced pass.

#include <string>
#include <vector>

#include "contraseq/data.hpp"
#include "contraseq/eval.hpp"
#include "contraseq/model.hpp"
#include "contraseq/training.hpp"

namespace contraseq::testing {

// Independent stepwise scorer: for each position i of the EOS-suffixed
// target, run a fresh forward pass over the prefix target[0..i] and take the
// log-probability of token i from the last row only.
inline double score_sentence_stepwise(const Model& model, const std::vector<int>& source,
                                      const std::vector<int>& target) {
  NoGradGuard no_grad;
  std::vector<int> suffixed(target);
  suffixed.push_back(kEosId);
  double total = 0;
  for (size_t i = 0; i < suffixed.size(); ++i) {
    const std::vector<int> prefix(suffixed.begin(), suffixed.begin() + i + 1);
    Tensor logits = forward_teacher_forced(model, source, prefix, RunMode{});
    total += row_log_prob(logits.data(), static_cast<int64_t>(i), logits.dim(1), suffixed[i]);
  }
  return total;
}

inline std::vector<std::string> corpus_lines(const std::vector<SentencePairText>& corpus,
                                             bool target_side) {
  std::vector<std::string> lines;
  for (const auto& pair : corpus) {
    const auto& toks = target_side ? pair.tgt : pair.src;
    std::string line;
    for (size_t i = 0; i < toks.size(); ++i) line += (i ? " " : "") + toks[i];
    lines.push_back(line);
  }
  return lines;
}

struct EncodedTask {
  Vocabulary src_vocab, tgt_vocab;
  IdCorpus corpus;
};

// Joint vocabulary over both sides (the tied-embedding setup).
inline EncodedTask encode_task(const std::vector<SentencePairText>& corpus,
                               int64_t vocab_max = 4000) {
  auto lines = corpus_lines(corpus, false);
  for (auto& l : corpus_lines(corpus, true)) lines.push_back(l);
  EncodedTask task;
  task.src_vocab = Vocabulary::build(lines, vocab_max);
  task.tgt_vocab = task.src_vocab;
  for (const auto& pair : corpus)
    task.corpus.push_back({task.src_vocab.encode(pair.src), task.tgt_vocab.encode(pair.tgt)});
  return task;
}

}  // namespace contraseq::testing
