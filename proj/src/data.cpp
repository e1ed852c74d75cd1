#include "contraseq/data.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "contraseq/rng.hpp"

namespace contraseq {

std::vector<std::string> split_whitespace(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write file: " + path);
  for (const auto& line : lines) out << line << '\n';
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

void Vocabulary::rebuild_index() {
  index_.clear();
  for (size_t i = 0; i < tokens.size(); ++i) index_[tokens[i]] = static_cast<int>(i);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& lines, int64_t max_size) {
  if (max_size < 4)
    throw config_error("vocabulary max_size must be at least 4 (reserved symbols), got " +
                       std::to_string(max_size));
  std::unordered_map<std::string, int64_t> freq;
  for (const auto& line : lines)
    for (auto& tok : split_whitespace(line)) ++freq[tok];
  if (freq.empty()) throw data_error("cannot build vocabulary from an empty corpus");

  std::vector<std::pair<std::string, int64_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  v.tokens = {kPadToken, kBosToken, kEosToken, kUnkToken};
  const size_t keep = static_cast<size_t>(max_size - 4);
  for (size_t i = 0; i < ranked.size() && i < keep; ++i) v.tokens.push_back(ranked[i].first);
  v.rebuild_index();
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= static_cast<int>(tokens.size()))
    throw vocab_error("token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(tokens.size()));
  return tokens[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& words) const {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

std::vector<int> Vocabulary::encode_line(const std::string& line) const {
  return encode(split_whitespace(line));
}

void Vocabulary::save(const std::string& path) const {
  write_lines(path, tokens);
}

Vocabulary Vocabulary::load(const std::string& path) {
  Vocabulary v;
  v.tokens = read_lines(path);
  if (v.tokens.size() < 4 || v.tokens[0] != kPadToken || v.tokens[1] != kBosToken ||
      v.tokens[2] != kEosToken || v.tokens[3] != kUnkToken)
    throw data_error("vocabulary file " + path + " does not start with the reserved symbols");
  v.rebuild_index();
  return v;
}

// ---------------------------------------------------------------------------
// BPE
// ---------------------------------------------------------------------------

std::vector<std::string> utf8_chars(const std::string& s) {
  std::vector<std::string> chars;
  size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    size_t len = 1;
    if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    if (i + len > s.size()) len = 1;
    chars.push_back(s.substr(i, len));
    i += len;
  }
  return chars;
}

namespace {

// One greedy left-to-right non-overlapping merge pass.
std::vector<std::string> merge_pass(const std::vector<std::string>& symbols, const BpeMerge& m) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  size_t j = 0;
  while (j < symbols.size()) {
    if (j + 1 < symbols.size() && symbols[j] == m.left && symbols[j + 1] == m.right) {
      out.push_back(m.left + m.right);
      j += 2;
    } else {
      out.push_back(symbols[j]);
      ++j;
    }
  }
  return out;
}

}  // namespace

std::vector<BpeMerge> bpe_learn(const std::vector<std::string>& lines, int64_t n_merges) {
  if (n_merges < 0)
    throw config_error("bpe_learn: merge count must be >= 0, got " + std::to_string(n_merges));
  std::unordered_map<std::string, int64_t> word_freq;
  for (const auto& line : lines)
    for (auto& w : split_whitespace(line)) ++word_freq[w];
  if (word_freq.empty()) throw data_error("bpe_learn: empty corpus");

  std::vector<std::pair<std::vector<std::string>, int64_t>> words;
  words.reserve(word_freq.size());
  {
    // Deterministic word order so tie patterns never depend on hash order.
    std::vector<std::pair<std::string, int64_t>> sorted(word_freq.begin(), word_freq.end());
    std::sort(sorted.begin(), sorted.end());
    for (auto& [w, f] : sorted) {
      auto symbols = utf8_chars(w);
      symbols.push_back(kEndOfWord);
      words.emplace_back(std::move(symbols), f);
    }
  }

  std::vector<BpeMerge> merges;
  for (int64_t iter = 0; iter < n_merges; ++iter) {
    std::map<std::pair<std::string, std::string>, int64_t> counts;
    for (const auto& [symbols, f] : words)
      for (size_t j = 0; j + 1 < symbols.size(); ++j)
        counts[{symbols[j], symbols[j + 1]}] += f;

    int64_t best_count = 0;
    const std::pair<std::string, std::string>* best = nullptr;
    for (const auto& [pair, count] : counts) {
      if (count > best_count) {  // map order makes the first max lexicographically least
        best_count = count;
        best = &pair;
      }
    }
    if (!best || best_count < 2) break;

    BpeMerge m{best->first, best->second};
    for (auto& [symbols, f] : words) symbols = merge_pass(symbols, m);
    merges.push_back(std::move(m));
  }
  return merges;
}

std::vector<std::string> bpe_apply(const std::vector<BpeMerge>& merges, const std::string& word) {
  std::vector<std::string> symbols = utf8_chars(word);
  symbols.push_back(kEndOfWord);
  for (const auto& m : merges) symbols = merge_pass(symbols, m);
  return symbols;
}

std::string bpe_render(const std::vector<std::string>& pieces) {
  std::vector<std::string> visible;
  for (const auto& p : pieces) {
    std::string s = p;
    if (s.size() >= kEndOfWord.size() &&
        s.compare(s.size() - kEndOfWord.size(), kEndOfWord.size(), kEndOfWord) == 0)
      s.erase(s.size() - kEndOfWord.size());
    if (!s.empty()) visible.push_back(std::move(s));
  }
  std::string out;
  for (size_t i = 0; i < visible.size(); ++i) {
    if (i) out += ' ';
    out += visible[i];
    if (i + 1 < visible.size()) out += "@@";
  }
  return out;
}

void save_merges(const std::string& path, const std::vector<BpeMerge>& merges) {
  std::vector<std::string> lines;
  lines.reserve(merges.size());
  for (const auto& m : merges) lines.push_back(m.left + " " + m.right);
  write_lines(path, lines);
}

std::vector<BpeMerge> load_merges(const std::string& path) {
  std::vector<BpeMerge> merges;
  const auto lines = read_lines(path);
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto pos = lines[i].find(' ');
    if (pos == std::string::npos || pos == 0 || pos + 1 >= lines[i].size())
      throw parse_error(path + ":" + std::to_string(i + 1) + ": expected 'left right'");
    merges.push_back({lines[i].substr(0, pos), lines[i].substr(pos + 1)});
  }
  return merges;
}

// ---------------------------------------------------------------------------
// Contrastive TSV
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == '\t') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

bool parse_int64(const std::string& s, int64_t& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (errno != 0 || end != s.c_str() + s.size()) return false;
  out = v;
  return true;
}

}  // namespace

std::vector<ContrastiveInstance> load_contrastive_tsv(const std::string& path) {
  const auto lines = read_lines(path);
  std::vector<ContrastiveInstance> instances;
  std::unordered_map<std::string, size_t> by_id;
  std::unordered_map<std::string, bool> has_ref;

  for (size_t ln = 0; ln < lines.size(); ++ln) {
    if (lines[ln].empty()) continue;
    const auto where = path + ":" + std::to_string(ln + 1);
    const auto fields = split_tabs(lines[ln]);
    if (fields.size() != 5)
      throw parse_error(where + ": expected 5 tab-separated fields, got " +
                        std::to_string(fields.size()));
    const std::string& id = fields[0];
    const std::string& kind = fields[1];
    const std::string& meta = fields[2];
    const auto source = split_whitespace(fields[3]);
    const auto target = split_whitespace(fields[4]);
    if (id.empty()) throw parse_error(where + ": empty instance id");
    if (kind != "ref" && kind != "contrast")
      throw parse_error(where + ": kind must be 'ref' or 'contrast', got '" + kind + "'");
    if (source.empty() || target.empty())
      throw parse_error(where + ": empty source or target");

    auto it = by_id.find(id);
    if (it == by_id.end()) {
      by_id[id] = instances.size();
      has_ref[id] = false;
      instances.push_back(ContrastiveInstance{});
      instances.back().id = id;
    }
    ContrastiveInstance& inst = instances[by_id[id]];

    if (kind == "ref") {
      if (has_ref[id]) throw data_error(where + ": duplicate reference row for instance " + id);
      has_ref[id] = true;
      inst.source = source;
      inst.reference = target;
      int64_t dist = 0;
      if (parse_int64(meta, dist)) inst.distance = dist;
      else inst.sense = meta;
    } else {
      inst.contrastive.push_back(target);
      if (inst.source.empty()) inst.source = source;
    }
  }

  for (const auto& inst : instances) {
    if (!has_ref[inst.id])
      throw data_error(path + ": instance " + inst.id + " has no reference row");
    if (inst.contrastive.empty())
      throw data_error(path + ": instance " + inst.id + " has no contrastive variants");
    for (const auto& c : inst.contrastive)
      if (c == inst.reference)
        throw data_error(path + ": instance " + inst.id +
                         " has a contrastive variant identical to the reference");
  }
  return instances;
}

namespace {
std::string join_tokens(const std::vector<std::string>& toks) {
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}
}  // namespace

void save_contrastive_tsv(const std::string& path,
                          const std::vector<ContrastiveInstance>& instances) {
  std::vector<std::string> lines;
  for (const auto& inst : instances) {
    const std::string meta = inst.distance ? std::to_string(*inst.distance) : inst.sense;
    lines.push_back(inst.id + "\tref\t" + meta + "\t" + join_tokens(inst.source) + "\t" +
                    join_tokens(inst.reference));
    for (const auto& variant : inst.contrastive)
      lines.push_back(inst.id + "\tcontrast\t" + meta + "\t" + join_tokens(inst.source) + "\t" +
                      join_tokens(variant));
  }
  write_lines(path, lines);
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

void SynthTaskConfig::validate(bool sense_task) const {
  std::string bad;
  auto flag = [&bad](const std::string& f) { bad += bad.empty() ? f : ", " + f; };
  if (count <= 0) flag("count");
  if (d_min < 0 || d_max < d_min) flag("distance range");
  if (n_fillers < 1) flag("n_fillers");
  if (sense_task) {
    if (sense_counts.empty()) flag("sense_counts (need >= 1 ambiguous noun)");
    for (int s : sense_counts)
      if (s < 2) flag("sense_counts (every noun needs >= 2 senses)");
  } else {
    if (n_subjects < 1) flag("n_subjects");
    if (n_verbs < 1) flag("n_verbs");
    if (attractor_prob < 0 || attractor_prob > 1) flag("attractor_prob");
    if (prefix_max < 0) flag("prefix_max");
  }
  if (!bad.empty()) throw config_error("invalid task config: " + bad);
}

namespace {

const char* num_suffix(bool plural) { return plural ? "_pl" : "_sg"; }

template <typename T>
void deterministic_shuffle(std::vector<T>& items, RngStream& rng) {
  for (size_t i = items.size(); i > 1; --i)
    std::swap(items[i - 1], items[rng.next_below(i)]);
}

std::string instance_id(const char* prefix, size_t index) {
  std::string n = std::to_string(index + 1);
  return std::string(prefix) + std::string(n.size() < 6 ? 6 - n.size() : 0, '0') + n;
}

}  // namespace

SynthSet gen_agreement_set(const SynthTaskConfig& cfg) {
  cfg.validate(false);
  RngStream rng(cfg.seed, "gen.agreement");
  const int64_t span = cfg.d_max - cfg.d_min + 1;

  std::vector<ContrastiveInstance> instances;
  instances.reserve(static_cast<size_t>(cfg.count));
  for (int64_t i = 0; i < cfg.count; ++i) {
    // Round-robin distances give an (almost) exactly uniform histogram.
    const int64_t d = cfg.d_min + (i % span);
    const int64_t prefix = cfg.prefix_max > 0 ? rng.next_range(0, cfg.prefix_max) : 0;
    const int64_t subj = rng.next_range(0, cfg.n_subjects - 1);
    const bool plural = rng.next_u64() & 1;
    const int64_t verb = rng.next_range(0, cfg.n_verbs - 1);

    ContrastiveInstance inst;
    inst.distance = d;
    auto& src = inst.source;
    auto& tgt = inst.reference;

    for (int64_t j = 0; j < prefix; ++j) {
      const int64_t f = rng.next_range(0, cfg.n_fillers - 1);
      src.push_back("s_fill" + std::to_string(f));
      tgt.push_back("t_fill" + std::to_string(f));
    }
    {
      const std::string stem = std::to_string(subj);
      src.push_back("s_noun" + stem +
                    (cfg.source_number_visible ? num_suffix(plural) : ""));
      tgt.push_back("t_noun" + stem + num_suffix(plural));
    }
    for (int64_t j = 0; j < d; ++j) {
      if (rng.next_double() < cfg.attractor_prob) {
        const int64_t noun = rng.next_range(0, cfg.n_subjects - 1);
        const bool attractor_plural = rng.next_u64() & 1;
        const std::string stem = std::to_string(noun);
        src.push_back("s_noun" + stem +
                      (cfg.source_number_visible ? num_suffix(attractor_plural) : ""));
        tgt.push_back("t_noun" + stem + num_suffix(attractor_plural));
      } else {
        const int64_t f = rng.next_range(0, cfg.n_fillers - 1);
        src.push_back("s_fill" + std::to_string(f));
        tgt.push_back("t_fill" + std::to_string(f));
      }
    }
    {
      const std::string stem = std::to_string(verb);
      src.push_back("s_verb" + stem +
                    (cfg.source_number_visible ? num_suffix(plural) : ""));
      tgt.push_back("t_verb" + stem + num_suffix(plural));
    }

    auto variant = tgt;
    variant.back() = "t_verb" + std::to_string(verb) + num_suffix(!plural);
    inst.contrastive.push_back(std::move(variant));
    instances.push_back(std::move(inst));
  }

  deterministic_shuffle(instances, rng);
  SynthSet set;
  for (size_t i = 0; i < instances.size(); ++i) {
    instances[i].id = instance_id("ag", i);
    set.corpus.push_back({instances[i].source, instances[i].reference});
  }
  set.instances = std::move(instances);
  return set;
}

SynthSet gen_wsd_set(const SynthTaskConfig& cfg) {
  cfg.validate(true);
  RngStream rng(cfg.seed, "gen.wsd");
  const int64_t n_nouns = static_cast<int64_t>(cfg.sense_counts.size());

  std::vector<ContrastiveInstance> instances;
  instances.reserve(static_cast<size_t>(cfg.count));
  for (int64_t i = 0; i < cfg.count; ++i) {
    const int64_t noun = i % n_nouns;  // round-robin over the sense inventory
    const int senses = cfg.sense_counts[static_cast<size_t>(noun)];
    const int sense = static_cast<int>(rng.next_range(0, senses - 1));
    const int64_t gap = rng.next_range(cfg.d_min, cfg.d_max);

    ContrastiveInstance inst;
    inst.sense = "n" + std::to_string(noun) + ".s" + std::to_string(sense);
    auto& src = inst.source;
    auto& tgt = inst.reference;

    src.push_back("s_ctx" + std::to_string(noun) + "_" + std::to_string(sense));
    // The target context word does not reveal the sense; disambiguation has
    // to come from the source side.
    tgt.push_back("t_ctx" + std::to_string(noun));
    for (int64_t j = 0; j < gap; ++j) {
      const int64_t f = rng.next_range(0, cfg.n_fillers - 1);
      src.push_back("s_fill" + std::to_string(f));
      tgt.push_back("t_fill" + std::to_string(f));
    }
    src.push_back("s_amb" + std::to_string(noun));
    tgt.push_back("t_sense" + std::to_string(noun) + "_" + std::to_string(sense));

    for (int other = 0; other < senses; ++other) {
      if (other == sense) continue;
      auto variant = tgt;
      variant.back() = "t_sense" + std::to_string(noun) + "_" + std::to_string(other);
      inst.contrastive.push_back(std::move(variant));
    }
    instances.push_back(std::move(inst));
  }

  deterministic_shuffle(instances, rng);
  SynthSet set;
  for (size_t i = 0; i < instances.size(); ++i) {
    instances[i].id = instance_id("ws", i);
    set.corpus.push_back({instances[i].source, instances[i].reference});
  }
  set.instances = std::move(instances);
  return set;
}

// ---------------------------------------------------------------------------
// Parallel corpora
// ---------------------------------------------------------------------------

std::vector<SentencePairText> load_parallel(const std::string& src_path,
                                            const std::string& tgt_path) {
  const auto src_lines = read_lines(src_path);
  const auto tgt_lines = read_lines(tgt_path);
  if (src_lines.size() != tgt_lines.size())
    throw data_error("parallel corpus line counts differ: " + src_path + " has " +
                     std::to_string(src_lines.size()) + ", " + tgt_path + " has " +
                     std::to_string(tgt_lines.size()));
  std::vector<SentencePairText> corpus;
  corpus.reserve(src_lines.size());
  for (size_t i = 0; i < src_lines.size(); ++i)
    corpus.push_back({split_whitespace(src_lines[i]), split_whitespace(tgt_lines[i])});
  return corpus;
}

void save_parallel(const std::string& src_path, const std::string& tgt_path,
                   const std::vector<SentencePairText>& corpus) {
  std::vector<std::string> src_lines, tgt_lines;
  src_lines.reserve(corpus.size());
  tgt_lines.reserve(corpus.size());
  for (const auto& pair : corpus) {
    src_lines.push_back(join_tokens(pair.src));
    tgt_lines.push_back(join_tokens(pair.tgt));
  }
  write_lines(src_path, src_lines);
  write_lines(tgt_path, tgt_lines);
}

}  // namespace contraseq
