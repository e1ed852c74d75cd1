#include "contraseq/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "contraseq/rng.hpp"

namespace contraseq {

KvMap parse_kv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open config file: " + path);
  KvMap kv;
  std::string line;
  size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    // trim
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw parse_error(path + ":" + std::to_string(ln) + ": expected key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

const std::string* KvReader::raw(const std::string& key) {
  auto it = kv_.find(key);
  return it == kv_.end() ? nullptr : &it->second;
}

std::string KvReader::get_string(const std::string& key, const std::string& fallback) {
  const std::string* v = raw(key);
  const std::string out = v ? *v : fallback;
  resolved_[key] = out;
  return out;
}

int64_t KvReader::get_int(const std::string& key, int64_t fallback) {
  const std::string* v = raw(key);
  int64_t out = fallback;
  if (v) {
    char* end = nullptr;
    out = std::strtoll(v->c_str(), &end, 10);
    if (end != v->c_str() + v->size() || v->empty())
      throw config_error("key '" + key + "': expected integer, got '" + *v + "'");
  }
  resolved_[key] = std::to_string(out);
  return out;
}

uint64_t KvReader::get_u64(const std::string& key, uint64_t fallback) {
  const std::string* v = raw(key);
  uint64_t out = fallback;
  if (v) {
    char* end = nullptr;
    out = std::strtoull(v->c_str(), &end, 10);
    if (end != v->c_str() + v->size() || v->empty())
      throw config_error("key '" + key + "': expected unsigned integer, got '" + *v + "'");
  }
  resolved_[key] = std::to_string(out);
  return out;
}

double KvReader::get_double(const std::string& key, double fallback) {
  const std::string* v = raw(key);
  double out = fallback;
  if (v) {
    char* end = nullptr;
    out = std::strtod(v->c_str(), &end);
    if (end != v->c_str() + v->size() || v->empty())
      throw config_error("key '" + key + "': expected number, got '" + *v + "'");
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", out);
  resolved_[key] = buf;
  return out;
}

bool KvReader::get_bool(const std::string& key, bool fallback) {
  const std::string* v = raw(key);
  bool out = fallback;
  if (v) {
    if (*v == "true" || *v == "1") out = true;
    else if (*v == "false" || *v == "0") out = false;
    else throw config_error("key '" + key + "': expected true/false, got '" + *v + "'");
  }
  resolved_[key] = out ? "true" : "false";
  return out;
}

std::vector<int> KvReader::get_int_list(const std::string& key, const std::vector<int>& fallback) {
  const std::string* v = raw(key);
  std::vector<int> out;
  if (v) {
    std::stringstream ss(*v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      char* end = nullptr;
      const long parsed = std::strtol(item.c_str(), &end, 10);
      if (end != item.c_str() + item.size())
        throw config_error("key '" + key + "': expected comma-separated integers, got '" + *v +
                           "'");
      out.push_back(static_cast<int>(parsed));
    }
    if (out.empty())
      throw config_error("key '" + key + "': expected comma-separated integers, got '" + *v + "'");
  } else {
    out = fallback;
  }
  std::string repr;
  for (size_t i = 0; i < out.size(); ++i) repr += (i ? "," : "") + std::to_string(out[i]);
  resolved_[key] = repr;
  return out;
}

std::vector<std::string> KvReader::unknown_keys() const {
  std::vector<std::string> unknown;
  for (const auto& [k, v] : kv_)
    if (!resolved_.count(k)) unknown.push_back(k);
  return unknown;
}

std::string content_hash_hex(const std::vector<std::string>& paths, const std::string& extra) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&h](const std::string& bytes) {
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open input file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    feed(path);
    feed(buf.str());
  }
  feed(extra);
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

void write_manifest(const std::string& out_dir, const std::string& command,
                    const KvMap& resolved, const std::string& input_hash) {
  const std::string path = out_dir + "/manifest.txt";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write manifest: " + path);
  out << "command=" << command << '\n';
  out << "input_hash=" << input_hash << '\n';
  for (const auto& [k, v] : resolved) out << k << '=' << v << '\n';
}

}  // namespace contraseq
