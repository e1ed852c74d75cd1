#include "contraseq/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "contraseq/checkpoint.hpp"
#include "contraseq/config.hpp"
#include "contraseq/data.hpp"
#include "contraseq/eval.hpp"
#include "contraseq/model.hpp"
#include "contraseq/training.hpp"

namespace fs = std::filesystem;

namespace contraseq {
namespace {

constexpr const char* kUsage =
    "usage: contraseq <generate|train|score|eval|report> [--config FILE] [--key value]...\n";

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw data_error("missing input file: " + path);
}

std::string out_dir(KvReader& reader) {
  const std::string out = reader.get_string("out", "");
  if (out.empty()) throw config_error("key 'out' is required (output directory)");
  fs::create_directories(out);
  return out;
}

void reject_unknown_keys(const KvReader& reader) {
  const auto unknown = reader.unknown_keys();
  if (!unknown.empty()) throw config_error("unknown key '" + unknown.front() + "'");
}

int threads_key(KvReader& reader) {
  // Falls back to CONTRASEQ_THREADS when the key is absent.
  int64_t fallback = 1;
  if (const char* env = std::getenv("CONTRASEQ_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) fallback = v;
  }
  const int64_t threads = reader.get_int("threads", fallback);
  if (threads < 1) throw config_error("key 'threads': must be >= 1");
  return static_cast<int>(threads);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

int cmd_generate(KvReader& reader, const std::vector<std::string>& config_files) {
  const std::string out = out_dir(reader);
  const std::string task = reader.get_string("task", "agreement");
  if (task != "agreement" && task != "wsd")
    throw config_error("key 'task': expected 'agreement' or 'wsd', got '" + task + "'");
  const uint64_t seed = reader.get_u64("seed", 1);

  SynthTaskConfig base;
  base.seed = seed;
  base.d_min = reader.get_int("d_min", 1);
  base.d_max = reader.get_int("d_max", 10);
  base.n_subjects = static_cast<int>(reader.get_int("n_subjects", 6));
  base.n_fillers = static_cast<int>(reader.get_int("n_fillers", 50));
  base.n_verbs = static_cast<int>(reader.get_int("n_verbs", 4));
  base.attractor_prob = reader.get_double("attractor_prob", 0.3);
  base.prefix_max = static_cast<int>(reader.get_int("prefix_max", 2));
  base.source_number_visible = reader.get_bool("source_number_visible", false);
  base.sense_counts = reader.get_int_list("sense_counts", {2, 3, 4, 5});

  const int64_t train_count = reader.get_int("train_count", 10000);
  const int64_t dev_count = reader.get_int("dev_count", 500);
  const int64_t test_count = reader.get_int("test_count", 1000);
  reject_unknown_keys(reader);
  write_manifest(out, "generate", reader.resolved(), content_hash_hex(config_files));

  auto generate_split = [&](int64_t count, const char* split) {
    SynthTaskConfig cfg = base;
    cfg.count = count;
    cfg.seed = mix_seed(seed, fnv1a64(split));
    return task == "agreement" ? gen_agreement_set(cfg) : gen_wsd_set(cfg);
  };
  const SynthSet train_set = generate_split(train_count, "train");
  const SynthSet dev_set = generate_split(dev_count, "dev");
  const SynthSet test_set = generate_split(test_count, "test");

  save_parallel(out + "/train.src", out + "/train.tgt", train_set.corpus);
  save_parallel(out + "/dev.src", out + "/dev.tgt", dev_set.corpus);
  save_contrastive_tsv(out + "/test.tsv", test_set.instances);
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

IdCorpus encode_corpus(const std::vector<SentencePairText>& corpus, const Vocabulary& src_vocab,
                       const Vocabulary& tgt_vocab) {
  IdCorpus ids;
  ids.reserve(corpus.size());
  for (const auto& pair : corpus)
    ids.push_back({src_vocab.encode(pair.src), tgt_vocab.encode(pair.tgt)});
  return ids;
}

int cmd_train(KvReader& reader, const std::vector<std::string>& config_files) {
  const std::string out = out_dir(reader);
  const std::string data = reader.get_string("data", "");
  if (data.empty()) throw config_error("key 'data' is required (corpus directory)");
  const std::string train_src = data + "/train.src", train_tgt = data + "/train.tgt";
  const std::string dev_src = data + "/dev.src", dev_tgt = data + "/dev.tgt";
  for (const auto& p : {train_src, train_tgt, dev_src, dev_tgt}) require_file(p);

  ModelConfig mc;
  mc.family = family_from_name(reader.get_string("family", "transformer"));
  mc.layers = reader.get_int("layers", 2);
  mc.hidden = reader.get_int("hidden", 64);
  mc.kernel = reader.get_int("kernel", 3);
  mc.heads = reader.get_int("heads", 4);
  mc.dropout_embed = reader.get_double("dropout_embed", 0.1);
  mc.dropout_block = reader.get_double("dropout_block", 0.1);
  mc.tie_embeddings = reader.get_bool("tie_embeddings", true);
  mc.max_length = reader.get_int("max_length", 128);
  mc.norm = reader.get_string("norm", "post") == "pre" ? NormPlacement::pre : NormPlacement::post;
  mc.rnn_cell =
      reader.get_string("rnn_cell", "lstm") == "gru" ? RnnCellKind::gru : RnnCellKind::lstm;
  const std::string pos = reader.get_string("pos", "default");
  if (pos == "none") mc.pos_mode_override = PosMode::none;
  else if (pos == "learned") mc.pos_mode_override = PosMode::learned;
  else if (pos == "sinusoidal") mc.pos_mode_override = PosMode::sinusoidal;
  else if (pos != "default")
    throw config_error("key 'pos': expected default/none/learned/sinusoidal");

  TrainConfig tc;
  tc.batch_tokens = reader.get_int("batch_tokens", 4096);
  tc.checkpoint_every = reader.get_int("checkpoint_every", 4000);
  tc.lr = reader.get_double("lr", 0.0002);
  tc.lr_factor = reader.get_double("lr_factor", 0.7);
  tc.plateau_patience = static_cast<int>(reader.get_int("plateau_patience", 8));
  tc.stop_patience = static_cast<int>(reader.get_int("stop_patience", 32));
  tc.label_smoothing = reader.get_double("label_smoothing", 0.1);
  tc.adam_beta1 = reader.get_double("adam_beta1", 0.9);
  tc.adam_beta2 = reader.get_double("adam_beta2", 0.999);
  tc.adam_eps = reader.get_double("adam_eps", 1e-8);
  tc.clip_norm = reader.get_double("clip_norm", 5.0);
  tc.max_updates = reader.get_int("max_updates", 2000);
  tc.seed = reader.get_u64("seed", 1);
  tc.threads = threads_key(reader);
  tc.stop_at_ppl = reader.get_double("stop_at_ppl", 0.0);
  const int64_t vocab_max = reader.get_int("vocab_max", 32000);
  reject_unknown_keys(reader);
  write_manifest(
      out, "train", reader.resolved(),
      content_hash_hex({train_src, train_tgt, dev_src, dev_tgt},
                       content_hash_hex(config_files)));

  const auto train_text = load_parallel(train_src, train_tgt);
  const auto dev_text = load_parallel(dev_src, dev_tgt);

  Vocabulary src_vocab, tgt_vocab;
  if (mc.tie_embeddings) {
    std::vector<std::string> joint = read_lines(train_src);
    for (auto& l : read_lines(train_tgt)) joint.push_back(l);
    src_vocab = Vocabulary::build(joint, vocab_max);
    tgt_vocab = src_vocab;
  } else {
    src_vocab = Vocabulary::build(read_lines(train_src), vocab_max);
    tgt_vocab = Vocabulary::build(read_lines(train_tgt), vocab_max);
  }
  src_vocab.save(out + "/vocab.src");
  tgt_vocab.save(out + "/vocab.tgt");
  mc.src_vocab = src_vocab.size();
  mc.tgt_vocab = tgt_vocab.size();

  Model model = build_model(mc, tc.seed);
  const IdCorpus train_ids = encode_corpus(train_text, src_vocab, tgt_vocab);
  const IdCorpus dev_ids = encode_corpus(dev_text, src_vocab, tgt_vocab);

  std::vector<CheckpointRecord> log;
  TrainCallbacks callbacks;
  callbacks.on_checkpoint = [&](const Model& m, const TrainState& state,
                                const CheckpointRecord& rec, bool improved) {
    char name[64];
    std::snprintf(name, sizeof(name), "/checkpoint_%06lld.ckpt",
                  static_cast<long long>(rec.step));
    save_checkpoint(out + name, m);
    if (improved) save_checkpoint(out + "/best.ckpt", m);
    log.push_back(rec);
  };

  auto write_metrics = [&] {
    std::ofstream metrics(out + "/metrics.csv", std::ios::binary);
    metrics << "step,loss,dev_ppl,lr\n";
    for (const auto& rec : log)
      metrics << rec.step << ',' << format_double(rec.train_loss) << ','
              << format_double(rec.dev_ppl) << ',' << format_double(rec.lr) << '\n';
  };

  try {
    train(model, train_ids, dev_ids, tc, &callbacks);
  } catch (const numeric_error&) {
    write_metrics();
    throw;
  }
  write_metrics();
  save_checkpoint(out + "/best.ckpt", model);  // model holds the best params
  return 0;
}

// ---------------------------------------------------------------------------
// score / eval / report
// ---------------------------------------------------------------------------

int cmd_score(KvReader& reader, const std::vector<std::string>& config_files) {
  const std::string out = out_dir(reader);
  const std::string model_path = reader.get_string("model", "");
  const std::string vocab_src = reader.get_string("vocab_src", "");
  const std::string vocab_tgt = reader.get_string("vocab_tgt", "");
  const std::string set_path = reader.get_string("set", "");
  const int threads = threads_key(reader);
  for (const auto& [key, path] : std::map<std::string, std::string>{{"model", model_path},
                                                                    {"vocab_src", vocab_src},
                                                                    {"vocab_tgt", vocab_tgt},
                                                                    {"set", set_path}}) {
    if (path.empty()) throw config_error("key '" + key + "' is required");
  }
  reject_unknown_keys(reader);
  for (const auto& p : {model_path, vocab_src, vocab_tgt, set_path}) require_file(p);
  write_manifest(out, "score", reader.resolved(),
                 content_hash_hex({model_path, vocab_src, vocab_tgt, set_path},
                                  content_hash_hex(config_files)));

  const Model model = load_checkpoint(model_path);
  const Vocabulary sv = Vocabulary::load(vocab_src);
  const Vocabulary tv = Vocabulary::load(vocab_tgt);
  const auto instances = load_contrastive_tsv(set_path);
  const auto result = evaluate_contrastive(model, instances, sv, tv, threads);
  write_scores_jsonl(out + "/scores.jsonl", result.records);
  return 0;
}

int cmd_eval(KvReader& reader, const std::vector<std::string>& config_files) {
  const std::string out = out_dir(reader);
  const std::string scores_path = reader.get_string("scores", "");
  if (scores_path.empty()) throw config_error("key 'scores' is required");
  const int64_t bucket_width = reader.get_int("bucket_width", 1);
  const int64_t long_threshold = reader.get_int("long_threshold", 10);
  reject_unknown_keys(reader);
  require_file(scores_path);
  write_manifest(out, "eval", reader.resolved(),
                 content_hash_hex({scores_path}, content_hash_hex(config_files)));

  const auto records = read_scores_jsonl(scores_path);
  if (records.empty()) throw data_error(scores_path + ": no score records");
  size_t with_distance = 0;
  for (const auto& r : records) with_distance += r.distance ? 1 : 0;

  BucketReport report;
  if (with_distance == records.size()) {
    report = bucket_report(records, bucket_width, long_threshold);
  } else if (with_distance == 0) {
    // Sense sets carry no distances; report overall accuracy only.
    report.n_total = static_cast<int64_t>(records.size());
    for (const auto& r : records) report.n_correct += r.correct ? 1 : 0;
    report.overall = static_cast<double>(report.n_correct) / static_cast<double>(report.n_total);
    report.long_threshold = long_threshold;
  } else {
    throw contract_error(scores_path + ": mixed records with and without distance metadata");
  }
  write_report_csv(out + "/report.csv", report);
  return 0;
}

struct ParsedReport {
  // key: "lo,hi" for buckets, "overall" / "long_range" for the totals.
  std::vector<std::pair<std::string, std::string>> rows;  // key -> accuracy
};

ParsedReport parse_report_csv(const std::string& path) {
  ParsedReport parsed;
  const auto lines = read_lines(path);
  for (size_t i = 0; i < lines.size(); ++i) {
    if (i == 0 || lines[i].empty()) continue;  // header
    std::vector<std::string> fields;
    std::stringstream ss(lines[i]);
    std::string item;
    while (std::getline(ss, item, ',')) fields.push_back(item);
    if (fields.size() != 5)
      throw parse_error(path + ":" + std::to_string(i + 1) + ": expected 5 columns");
    const std::string key =
        (fields[0] == "overall" || fields[0] == "long_range") ? fields[0]
                                                              : fields[0] + "," + fields[1];
    parsed.rows.emplace_back(key, fields[4]);
  }
  return parsed;
}

int cmd_report(KvReader& reader, const std::vector<std::string>& config_files) {
  const std::string out = out_dir(reader);
  const std::string inputs_key = reader.get_string("inputs", "");
  if (inputs_key.empty()) throw config_error("key 'inputs' is required (comma-separated CSVs)");
  std::vector<std::string> inputs;
  {
    std::stringstream ss(inputs_key);
    std::string item;
    while (std::getline(ss, item, ',')) inputs.push_back(item);
  }
  std::string labels_key = reader.get_string("labels", "");
  std::vector<std::string> labels;
  if (!labels_key.empty()) {
    std::stringstream ss(labels_key);
    std::string item;
    while (std::getline(ss, item, ',')) labels.push_back(item);
    if (labels.size() != inputs.size())
      throw config_error("key 'labels': expected " + std::to_string(inputs.size()) + " labels");
  } else {
    for (const auto& p : inputs) labels.push_back(fs::path(p).stem().string());
  }
  reject_unknown_keys(reader);
  for (const auto& p : inputs) require_file(p);
  write_manifest(out, "report", reader.resolved(),
                 content_hash_hex(inputs, content_hash_hex(config_files)));

  std::vector<ParsedReport> reports;
  reports.reserve(inputs.size());
  for (const auto& p : inputs) reports.push_back(parse_report_csv(p));

  // Row keys in first-appearance order across inputs, buckets before totals.
  std::vector<std::string> bucket_keys;
  bool any_overall = false, any_long = false;
  for (const auto& rep : reports) {
    for (const auto& [key, acc] : rep.rows) {
      if (key == "overall") any_overall = true;
      else if (key == "long_range") any_long = true;
      else if (std::find(bucket_keys.begin(), bucket_keys.end(), key) == bucket_keys.end())
        bucket_keys.push_back(key);
    }
  }
  std::sort(bucket_keys.begin(), bucket_keys.end(), [](const std::string& a, const std::string& b) {
    return std::stoll(a) < std::stoll(b);
  });
  if (any_overall) bucket_keys.push_back("overall");
  if (any_long) bucket_keys.push_back("long_range");

  std::ofstream merged(out + "/report.csv", std::ios::binary);
  if (!merged) throw data_error("cannot write merged report");
  merged << "bucket_min,bucket_max";
  for (const auto& label : labels) merged << ',' << label;
  merged << '\n';
  for (const auto& key : bucket_keys) {
    if (key == "overall" || key == "long_range") merged << key << ',';
    else merged << key;
    for (const auto& rep : reports) {
      std::string acc;
      for (const auto& [k, a] : rep.rows)
        if (k == key) acc = a;
      merged << ',' << acc;
    }
    merged << '\n';
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  try {
    if (args.empty()) {
      std::cerr << kUsage;
      return 2;
    }
    const std::string command = args[0];
    KvMap kv;
    std::vector<std::string> config_files;
    for (size_t i = 1; i < args.size(); ++i) {
      const std::string& arg = args[i];
      if (arg.rfind("--", 0) != 0)
        throw config_error("expected --key value pairs, got '" + arg + "'");
      if (i + 1 >= args.size()) throw config_error("missing value for '" + arg + "'");
      const std::string key = arg.substr(2);
      const std::string& value = args[++i];
      if (key == "config") {
        require_file(value);
        for (auto& [k, v] : parse_kv_file(value)) kv[k] = v;
        config_files.push_back(value);
      } else {
        kv[key] = value;  // later overrides win
      }
    }
    KvReader reader(std::move(kv));
    if (command == "generate") return cmd_generate(reader, config_files);
    if (command == "train") return cmd_train(reader, config_files);
    if (command == "score") return cmd_score(reader, config_files);
    if (command == "eval") return cmd_eval(reader, config_files);
    if (command == "report") return cmd_report(reader, config_files);
    std::cerr << "unknown subcommand '" << command << "'\n" << kUsage;
    return 2;
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const parse_error& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 3;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const contract_error& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 3;
  } catch (const error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace contraseq
