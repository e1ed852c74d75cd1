#pragma once

// Data layer: vocabularies, BPE subwords, synthetic agreement / word-sense
// task generation, and contrastive test-set files.

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "contraseq/errors.hpp"
#include "contraseq/special_tokens.hpp"

namespace contraseq {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

// Token <-> id bijection with fixed reserved ids 0..3. Ids are assigned by
// descending frequency, ties broken lexicographically.
struct Vocabulary {
  std::vector<std::string> tokens;  // index == id; first four are reserved

  static Vocabulary build(const std::vector<std::string>& lines, int64_t max_size);

  int id(const std::string& token) const;
  const std::string& token(int id) const;
  int64_t size() const { return static_cast<int64_t>(tokens.size()); }

  std::vector<int> encode(const std::vector<std::string>& words) const;
  std::vector<int> encode_line(const std::string& line) const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  void rebuild_index();
  std::unordered_map<std::string, int> index_;
};

std::vector<std::string> split_whitespace(const std::string& line);

// ---------------------------------------------------------------------------
// Byte pair encoding
// ---------------------------------------------------------------------------

// Words are terminated with this marker as a separate final symbol; the
// word-internal "@@" continuation notation appears only in rendered output.
inline const std::string kEndOfWord = "⟨/w⟩";  // ⟨/w⟩

struct BpeMerge {
  std::string left, right;
  bool operator==(const BpeMerge&) const = default;
};

std::vector<std::string> utf8_chars(const std::string& s);

// Greedy most-frequent adjacent-pair merges over the word frequencies of
// `lines` (joint over however many corpora the caller concatenates). Ties
// break by lexicographic pair order; learning stops early once no pair
// occurs twice.
std::vector<BpeMerge> bpe_learn(const std::vector<std::string>& lines, int64_t n_merges);

// Segments one word by replaying merges in learned order. Concatenating the
// result (marker stripped) always reproduces the word.
std::vector<std::string> bpe_apply(const std::vector<BpeMerge>& merges, const std::string& word);

// File-output notation: continuation pieces get "@@", the marker is dropped.
std::string bpe_render(const std::vector<std::string>& pieces);

void save_merges(const std::string& path, const std::vector<BpeMerge>& merges);
std::vector<BpeMerge> load_merges(const std::string& path);

// ---------------------------------------------------------------------------
// Contrastive instances
// ---------------------------------------------------------------------------

struct ContrastiveInstance {
  std::string id;
  std::vector<std::string> source;
  std::vector<std::string> reference;
  std::vector<std::vector<std::string>> contrastive;  // >= 1 variants
  std::optional<int64_t> distance;                    // agreement sets
  std::string sense;                                  // sense sets
};

std::vector<ContrastiveInstance> load_contrastive_tsv(const std::string& path);
void save_contrastive_tsv(const std::string& path,
                          const std::vector<ContrastiveInstance>& instances);

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

struct SentencePairText {
  std::vector<std::string> src, tgt;
};

struct SynthSet {
  std::vector<SentencePairText> corpus;          // aligned with `instances`
  std::vector<ContrastiveInstance> instances;
};

struct SynthTaskConfig {
  int64_t count = 1000;
  uint64_t seed = 1;
  int64_t d_min = 1, d_max = 10;  // subject-verb span (agreement) or
                                  // context-noun gap (sense task)
  int n_subjects = 6;
  int n_fillers = 50;
  int n_verbs = 4;
  // Fraction of span tokens that are other number-marked nouns. Attractors
  // force the verb choice to track the first noun rather than the nearest.
  double attractor_prob = 0.3;
  int prefix_max = 2;  // filler tokens allowed before the subject
  // When false (default) the source carries no grammatical number, so
  // agreement is decidable only from the target prefix; see README.
  bool source_number_visible = false;
  std::vector<int> sense_counts = {2, 3, 4, 5};  // per ambiguous noun

  void validate(bool sense_task) const;
};

// Number-agreement task: the reference verb must match the grammatical
// number of the first (subject) noun across d intervening tokens; the one
// contrastive variant flips the verb's number. metadata.distance = d.
SynthSet gen_agreement_set(const SynthTaskConfig& cfg);

// Sense task: a context token early in the source determines which
// translation of the ambiguous noun is correct; every other sense of that
// noun yields one contrastive variant.
SynthSet gen_wsd_set(const SynthTaskConfig& cfg);

// ---------------------------------------------------------------------------
// Parallel corpora (one sentence per line, whitespace tokens, UTF-8, LF)
// ---------------------------------------------------------------------------

std::vector<SentencePairText> load_parallel(const std::string& src_path,
                                            const std::string& tgt_path);
void save_parallel(const std::string& src_path, const std::string& tgt_path,
                   const std::vector<SentencePairText>& corpus);

std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, const std::vector<std::string>& lines);

}  // namespace contraseq
