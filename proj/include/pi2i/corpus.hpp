#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "pi2i/common.hpp"

namespace pi2i {

// ---------------------------------------------------------------------------
// Vocabulary: raw id token -> dense id, first-seen order. Dense ids start at
// 1; 0 is the reserved OOV row of every embedding table. Persisted as a
// two-column TSV `raw_id \t dense_id`.

class Vocabulary {
 public:
  Id add_or_get(std::string_view raw) {
    auto it = to_dense_.find(std::string(raw));
    if (it != to_dense_.end()) return it->second;
    Id id = static_cast<Id>(to_raw_.size() + 1);
    to_raw_.emplace_back(raw);
    to_dense_.emplace(raw, id);
    return id;
  }

  std::optional<Id> lookup(std::string_view raw) const {
    auto it = to_dense_.find(std::string(raw));
    if (it == to_dense_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& raw(Id dense) const { return to_raw_.at(static_cast<std::size_t>(dense - 1)); }
  std::size_t size() const { return to_raw_.size(); }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocabulary file: " + path);
    for (std::size_t i = 0; i < to_raw_.size(); ++i)
      out << to_raw_[i] << '\t' << (i + 1) << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read vocabulary file: " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto cols = split_view(line, '\t');
      std::int64_t dense = 0;
      if (cols.size() != 2 || !parse_i64(cols[1], dense))
        throw IoError("malformed vocabulary row in " + path + ": " + line);
      if (dense != static_cast<std::int64_t>(v.to_raw_.size() + 1))
        throw IoError("vocabulary rows out of order in " + path);
      v.add_or_get(cols[0]);
    }
    return v;
  }

  // Order-sensitive content hash; checkpoints embed it so a model is never
  // scored against ids from a different mapping.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& raw : to_raw_) {
      h = fnv1a64(raw, h);
      h = fnv1a64("\x1f", h);
    }
    return h;
  }

 private:
  std::unordered_map<std::string, Id> to_dense_;
  std::vector<std::string> to_raw_;
};

// ---------------------------------------------------------------------------
// Interactions and histories.

struct SideInfo {
  std::map<std::string, std::string> categorical;
  std::map<std::string, double> numeric;

  bool empty() const { return categorical.empty() && numeric.empty(); }
  bool operator==(const SideInfo&) const = default;
};

// One (user, item, timestamp) click event.
struct Interaction {
  Id user_id = 0;
  Id item_id = 0;
  Timestamp timestamp = 0;
  SideInfo side_info;

  bool operator==(const Interaction&) const = default;
};

// Chronological click sequence of one user. Events are sorted by
// (timestamp, item_id) ascending; the item tie-break keeps ordering
// deterministic across runs and platforms.
struct UserHistory {
  Id user_id = 0;
  std::vector<Interaction> events;

  bool operator==(const UserHistory&) const = default;
};

// Per-item attributes folded out of the event stream (last value wins).
// Categorical values stay raw strings; the model maps the fields it embeds
// through its own vocabularies.
struct ItemMeta {
  std::unordered_map<Id, double> price;
  std::unordered_map<Id, std::map<std::string, std::string>> categorical;

  const double* find_price(Id item) const {
    auto it = price.find(item);
    return it == price.end() ? nullptr : &it->second;
  }
};

enum class LogFormat { tsv, csv };

struct LoadResult {
  std::vector<Interaction> interactions;
  Vocabulary user_vocab;
  Vocabulary item_vocab;
  ItemMeta item_meta;
  std::size_t warn_count = 0;
};

namespace detail {

inline bool parse_side_column(std::string_view col, SideInfo& side) {
  std::size_t eq = col.find('=');
  if (eq == std::string_view::npos || eq == 0 || eq + 1 > col.size()) return false;
  std::string key(col.substr(0, eq));
  std::string_view val = col.substr(eq + 1);
  if (val.empty()) return false;
  double num = 0.0;
  if (parse_f64(val, num))
    side.numeric[key] = num;
  else
    side.categorical[key] = std::string(val);
  return true;
}

}  // namespace detail

// Parses an interaction log. Rows are `user \t item \t timestamp` with
// optional trailing `key=value` side-info columns. Malformed rows are skipped
// and counted; the load fails only when they are the majority of a non-empty
// file. Existing vocabularies may be passed in so that a re-load under a
// persisted mapping reproduces identical dense ids.
inline LoadResult load_interactions(const std::string& path, LogFormat format = LogFormat::tsv,
                                    Vocabulary user_vocab = {}, Vocabulary item_vocab = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open interaction log: " + path);
  const char sep = format == LogFormat::tsv ? '\t' : ',';

  LoadResult result;
  result.user_vocab = std::move(user_vocab);
  result.item_vocab = std::move(item_vocab);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++rows;
    auto cols = split_view(line, sep);
    if (cols.size() < 3 || cols[0].empty() || cols[1].empty()) {
      ++result.warn_count;
      continue;
    }
    std::int64_t ts = 0;
    if (!parse_i64(cols[2], ts)) {
      ++result.warn_count;
      continue;
    }
    Interaction ev;
    ev.timestamp = ts;
    bool ok = true;
    for (std::size_t c = 3; c < cols.size(); ++c) {
      if (!detail::parse_side_column(cols[c], ev.side_info)) {
        ok = false;
        break;
      }
    }
    if (!ok) {
      ++result.warn_count;
      continue;
    }
    ev.user_id = result.user_vocab.add_or_get(cols[0]);
    ev.item_id = result.item_vocab.add_or_get(cols[1]);
    if (ev.side_info.numeric.count("price"))
      result.item_meta.price[ev.item_id] = ev.side_info.numeric.at("price");
    for (const auto& [k, v] : ev.side_info.categorical)
      result.item_meta.categorical[ev.item_id][k] = v;
    result.interactions.push_back(std::move(ev));
  }
  if (rows > 0 && result.warn_count * 2 > rows)
    throw IoError(path + ": " + std::to_string(result.warn_count) + " of " +
                  std::to_string(rows) + " rows are malformed");
  return result;
}

// Writes histories back to the interaction TSV format, raw ids restored
// through the vocabularies. Re-loading under the same vocabularies yields
// identical histories.
inline void save_histories_tsv(const std::vector<UserHistory>& histories,
                               const Vocabulary& user_vocab, const Vocabulary& item_vocab,
                               const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write: " + path);
  for (const auto& h : histories) {
    for (const auto& ev : h.events) {
      out << user_vocab.raw(ev.user_id) << '\t' << item_vocab.raw(ev.item_id) << '\t'
          << ev.timestamp;
      for (const auto& [k, v] : ev.side_info.categorical) out << '\t' << k << '=' << v;
      for (const auto& [k, v] : ev.side_info.numeric) out << '\t' << k << '=' << format_double(v);
      out << '\n';
    }
  }
}

// Groups interactions by user and sorts each stream by (timestamp, item_id).
// Output histories are ordered by user id.
inline std::vector<UserHistory> build_histories(const std::vector<Interaction>& interactions) {
  std::unordered_map<Id, std::vector<Interaction>> by_user;
  for (const auto& ev : interactions) by_user[ev.user_id].push_back(ev);

  std::vector<Id> users;
  users.reserve(by_user.size());
  for (const auto& [u, _] : by_user) users.push_back(u);
  std::sort(users.begin(), users.end());

  std::vector<UserHistory> histories;
  histories.reserve(users.size());
  for (Id u : users) {
    UserHistory h;
    h.user_id = u;
    h.events = std::move(by_user[u]);
    std::stable_sort(h.events.begin(), h.events.end(), [](const Interaction& a, const Interaction& b) {
      return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.item_id < b.item_id;
    });
    histories.push_back(std::move(h));
  }
  return histories;
}

// One held-out next-item prediction target together with the full context
// available at its time.
struct EvalCase {
  Id user_id = 0;
  std::vector<Interaction> context;
  Interaction target;
};

struct DatasetSplit {
  std::vector<UserHistory> train_histories;
  std::vector<EvalCase> valid_cases;
  std::vector<EvalCase> test_cases;
  std::set<Id> item_vocab;
  std::set<Id> user_vocab;
};

// Leave-last-out split: for each history with at least min_len events whose
// last three timestamps strictly increase, the last event becomes the test
// target, the second-to-last the validation target, and the remaining prefix
// goes to training. Histories that do not qualify go entirely to training, so
// they still feed index construction. The strict-timestamp requirement keeps
// the no-leakage invariant exact even when the log has duplicate timestamps.
inline DatasetSplit split_leave_last(const std::vector<UserHistory>& histories,
                                     std::size_t min_len = 3) {
  if (min_len < 3) throw ConfigError("split_leave_last: min_len must be >= 3");
  DatasetSplit split;
  for (const auto& h : histories) {
    split.user_vocab.insert(h.user_id);
    for (const auto& ev : h.events) split.item_vocab.insert(ev.item_id);

    const std::size_t n = h.events.size();
    bool eligible = n >= min_len;
    if (eligible) {
      const auto& a = h.events[n - 3];
      const auto& b = h.events[n - 2];
      const auto& c = h.events[n - 1];
      eligible = a.timestamp < b.timestamp && b.timestamp < c.timestamp;
    }
    if (!eligible) {
      split.train_histories.push_back(h);
      continue;
    }

    UserHistory train;
    train.user_id = h.user_id;
    train.events.assign(h.events.begin(), h.events.end() - 2);
    split.train_histories.push_back(std::move(train));

    EvalCase valid;
    valid.user_id = h.user_id;
    valid.context.assign(h.events.begin(), h.events.end() - 2);
    valid.target = h.events[n - 2];
    split.valid_cases.push_back(std::move(valid));

    EvalCase test;
    test.user_id = h.user_id;
    test.context.assign(h.events.begin(), h.events.end() - 1);
    test.target = h.events[n - 1];
    split.test_cases.push_back(std::move(test));
  }
  return split;
}

}  // namespace pi2i
