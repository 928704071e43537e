#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pi2i/common.hpp"

namespace pi2i {

// Flat key-value pipeline configuration. The canonical serialization lists
// every key in a fixed order, so `parse(serialize(cfg))` echoes back byte
// identically and config files double as diffable experiment records.
struct PipelineConfig {
  // paths
  std::string data;
  std::string format = "tsv";
  std::string index_path = "index.tsv";
  std::string checkpoint_path = "model.ckpt";
  std::string samples_path = "samples.tsv";
  std::string item_vocab_path = "item_vocab.tsv";
  std::string user_vocab_path = "user_vocab.tsv";
  std::string train_log_path = "train_log.tsv";
  std::string build_stats_path = "build_stats.jsonl";
  std::string eval_report_path = "eval.tsv";
  std::string retrieve_path = "retrieved.tsv";
  std::string sweep_report_path = "sweep.tsv";
  std::string stats_path = "stats.tsv";
  std::string stats_per_user_path = "stats_users.tsv";

  // shared
  std::uint64_t seed = 42;
  std::size_t threads = 1;
  std::size_t min_len = 3;

  // indexer
  double alpha = 1.0;
  std::size_t truncation_size = 1250;
  bool weighted = true;
  bool exclude_self_pairs = false;
  std::size_t window = 0;
  std::size_t user_item_cap = 500;
  double min_score = 0.0;

  // sampler
  std::size_t n_hard = 20;
  std::size_t n_easy = 80;
  double hard_bias = 1.0;
  double easy_bias = 1.0;

  // model / training
  double learning_rate = 0.01;
  std::size_t batch_size = 512;
  std::size_t embedding_dim = 64;
  std::size_t heads = 2;
  std::size_t key_dim = 0;
  std::size_t max_seq_len = 50;
  std::size_t epochs = 1;
  std::string attention_mode = "target";
  std::string trigger_mode = "multi";
  bool literal_eq9 = false;
  std::size_t query_hidden = 0;
  std::size_t out_hidden1 = 128;
  std::size_t out_hidden2 = 64;
  std::vector<std::string> side_fields;
  bool use_coclick_feature = false;

  // evaluation
  std::vector<std::size_t> k_list = {10, 50};
  std::vector<std::size_t> sweep_t = {50, 250, 1250};
  std::size_t stats_k = 50;
  std::size_t stats_top_users = 3;

  template <typename V>
  void visit(V&& v) {
    v("data", data);
    v("format", format);
    v("index_path", index_path);
    v("checkpoint_path", checkpoint_path);
    v("samples_path", samples_path);
    v("item_vocab_path", item_vocab_path);
    v("user_vocab_path", user_vocab_path);
    v("train_log_path", train_log_path);
    v("build_stats_path", build_stats_path);
    v("eval_report_path", eval_report_path);
    v("retrieve_path", retrieve_path);
    v("sweep_report_path", sweep_report_path);
    v("stats_path", stats_path);
    v("stats_per_user_path", stats_per_user_path);
    v("seed", seed);
    v("threads", threads);
    v("min_len", min_len);
    v("alpha", alpha);
    v("truncation_size", truncation_size);
    v("weighted", weighted);
    v("exclude_self_pairs", exclude_self_pairs);
    v("window", window);
    v("user_item_cap", user_item_cap);
    v("min_score", min_score);
    v("n_hard", n_hard);
    v("n_easy", n_easy);
    v("hard_bias", hard_bias);
    v("easy_bias", easy_bias);
    v("learning_rate", learning_rate);
    v("batch_size", batch_size);
    v("embedding_dim", embedding_dim);
    v("heads", heads);
    v("key_dim", key_dim);
    v("max_seq_len", max_seq_len);
    v("epochs", epochs);
    v("attention_mode", attention_mode);
    v("trigger_mode", trigger_mode);
    v("literal_eq9", literal_eq9);
    v("query_hidden", query_hidden);
    v("out_hidden1", out_hidden1);
    v("out_hidden2", out_hidden2);
    v("side_fields", side_fields);
    v("use_coclick_feature", use_coclick_feature);
    v("k_list", k_list);
    v("sweep_t", sweep_t);
    v("stats_k", stats_k);
    v("stats_top_users", stats_top_users);
  }
};

namespace cfgdetail {

inline std::string to_value(const std::string& v) { return v; }
inline std::string to_value(double v) { return format_double(v); }
inline std::string to_value(bool v) { return v ? "1" : "0"; }
inline std::string to_value(std::size_t v) { return std::to_string(v); }
template <typename T>
inline std::string to_value(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += to_value(v[i]);
  }
  return s;
}

inline void from_value(const std::string& raw, std::string& out) { out = raw; }
inline void from_value(const std::string& raw, double& out) {
  if (!parse_f64(raw, out)) throw ConfigError("expected a number, got '" + raw + "'");
}
inline void from_value(const std::string& raw, bool& out) {
  if (raw == "1" || raw == "true")
    out = true;
  else if (raw == "0" || raw == "false")
    out = false;
  else
    throw ConfigError("expected 0/1, got '" + raw + "'");
}
inline void from_value(const std::string& raw, std::size_t& out) {
  std::int64_t v = 0;
  if (!parse_i64(raw, v) || v < 0) throw ConfigError("expected a count, got '" + raw + "'");
  out = static_cast<std::size_t>(v);
}
template <typename T>
inline void from_value(const std::string& raw, std::vector<T>& out) {
  out.clear();
  if (raw.empty()) return;
  for (auto part : split_view(raw, ',')) {
    T v{};
    from_value(std::string(part), v);
    out.push_back(std::move(v));
  }
}

inline std::string trim(std::string_view s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace cfgdetail

inline std::string serialize_config(const PipelineConfig& cfg) {
  std::string out;
  const_cast<PipelineConfig&>(cfg).visit([&](const char* key, auto& field) {
    out += key;
    out += " = ";
    out += cfgdetail::to_value(field);
    out += '\n';
  });
  return out;
}

inline PipelineConfig parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string stripped = cfgdetail::trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = cfgdetail::trim(stripped.substr(0, eq));
    const std::string val = cfgdetail::trim(stripped.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, val).second)
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }

  PipelineConfig cfg;
  cfg.visit([&](const char* key, auto& field) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    try {
      cfgdetail::from_value(it->second, field);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
    kv.erase(it);
  });
  if (!kv.empty()) throw ConfigError("unknown config key '" + kv.begin()->first + "'");
  return cfg;
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace pi2i
