#pragma once

// Flat key=value configuration files plus --key value overrides, and the
// run manifest written into every output directory.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "contraseq/errors.hpp"

namespace contraseq {

using KvMap = std::map<std::string, std::string>;

// Parses `key=value` lines; '#' starts a comment, blank lines are skipped.
KvMap parse_kv_file(const std::string& path);

// Typed access over a KvMap. Every get records the effective value (default
// or supplied), so the reader can both reject unknown keys and emit the
// fully-resolved configuration for the manifest.
class KvReader {
 public:
  explicit KvReader(KvMap kv) : kv_(std::move(kv)) {}

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback);
  int64_t get_int(const std::string& key, int64_t fallback);
  uint64_t get_u64(const std::string& key, uint64_t fallback);
  double get_double(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback);

  // Keys present in the map but never requested.
  std::vector<std::string> unknown_keys() const;

  // Every requested key with its effective (possibly defaulted) value.
  const KvMap& resolved() const { return resolved_; }

 private:
  const std::string* raw(const std::string& key);
  KvMap kv_;
  KvMap resolved_;
};

// FNV-1a over the raw bytes of each listed file (missing files raise
// data_error), combined in order; empty list hashes to the offset basis.
std::string content_hash_hex(const std::vector<std::string>& paths,
                             const std::string& extra = "");

// Writes `<out_dir>/manifest.txt` with the subcommand, the input content
// hash, and the resolved configuration. Must be called before a run writes
// any other output.
void write_manifest(const std::string& out_dir, const std::string& command,
                    const KvMap& resolved, const std::string& input_hash);

}  // namespace contraseq
