#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pi2i/common.hpp"

namespace pi2i {

struct IndexEntry {
  Id target = 0;
  double score = 0.0;
  std::uint32_t rank = 0;  // 1-based position within the trigger's list

  bool operator==(const IndexEntry&) const = default;
};

// Trigger -> ranked, truncated target list. Per trigger the list holds at
// most `truncation_size` entries with strictly positive scores, ordered by
// (score desc, target id asc), ranks 1..len, and never contains the trigger
// itself.
struct I2ITable {
  std::map<Id, std::vector<IndexEntry>> entries;
  std::size_t truncation_size = 0;
  double alpha = 1.0;
  bool weighted = true;

  const std::vector<IndexEntry>* targets_of(Id trigger) const {
    auto it = entries.find(trigger);
    return it == entries.end() ? nullptr : &it->second;
  }

  bool contains(Id trigger, Id target) const {
    const auto* list = targets_of(trigger);
    if (!list) return false;
    for (const auto& e : *list)
      if (e.target == target) return true;
    return false;
  }

  std::size_t total_entries() const {
    std::size_t n = 0;
    for (const auto& [_, list] : entries) n += list.size();
    return n;
  }

  // Keeps the first min(T, len) entries of every list. Valid because lists
  // are score-ordered: the truncated table equals a fresh build at smaller T.
  I2ITable truncated(std::size_t T) const {
    I2ITable out;
    out.truncation_size = T;
    out.alpha = alpha;
    out.weighted = weighted;
    for (const auto& [trigger, list] : entries) {
      auto& dst = out.entries[trigger];
      dst.assign(list.begin(), list.begin() + std::min(T, list.size()));
    }
    return out;
  }

  bool operator==(const I2ITable&) const = default;
};

// File format: `#pi2i-index v1 alpha=<f> T=<n> weighted=<0|1>` header, then
// `trigger \t target \t score \t rank` rows sorted by (trigger, rank), scores
// with 17 significant digits so the round trip is bit-exact.
inline void save_index(const I2ITable& table, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write index file: " + path);
  out << "#pi2i-index v1 alpha=" << format_double(table.alpha) << " T=" << table.truncation_size
      << " weighted=" << (table.weighted ? 1 : 0) << '\n';
  for (const auto& [trigger, list] : table.entries) {
    for (const auto& e : list)
      out << trigger << '\t' << e.target << '\t' << format_double(e.score) << '\t' << e.rank
          << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

inline I2ITable load_index(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open index file: " + path);

  std::string header;
  if (!std::getline(in, header)) throw IoError(path + ": empty index file");
  auto fields = split_view(header, ' ');
  if (fields.size() != 5 || fields[0] != "#pi2i-index")
    throw IoError(path + ": not a pi2i index file");
  if (fields[1] != "v1")
    throw IoError(path + ": unsupported index version '" + std::string(fields[1]) + "'");

  I2ITable table;
  auto parse_kv = [&](std::string_view field, std::string_view key) -> std::string_view {
    if (field.substr(0, key.size()) != key)
      throw IoError(path + ": malformed index header field '" + std::string(field) + "'");
    return field.substr(key.size());
  };
  std::int64_t t_val = 0, w_val = 0;
  if (!parse_f64(parse_kv(fields[2], "alpha="), table.alpha) ||
      !parse_i64(parse_kv(fields[3], "T="), t_val) ||
      !parse_i64(parse_kv(fields[4], "weighted="), w_val) || t_val < 1 ||
      (w_val != 0 && w_val != 1))
    throw IoError(path + ": malformed index header: " + header);
  table.truncation_size = static_cast<std::size_t>(t_val);
  table.weighted = w_val == 1;

  std::string line;
  std::size_t lineno = 1;
  Id prev_trigger = -1;
  std::uint32_t prev_rank = 0;
  double prev_score = 0.0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cols = split_view(line, '\t');
    std::int64_t trigger = 0, target = 0, rank = 0;
    double score = 0.0;
    if (cols.size() != 4 || !parse_i64(cols[0], trigger) || !parse_i64(cols[1], target) ||
        !parse_f64(cols[2], score) || !parse_i64(cols[3], rank))
      throw IoError(path + ": corrupted index row at line " + std::to_string(lineno));
    if (trigger == target || score <= 0.0 || rank < 1)
      throw IoError(path + ": invalid index entry at line " + std::to_string(lineno));

    if (static_cast<Id>(trigger) != prev_trigger) {
      if (static_cast<Id>(trigger) < prev_trigger || rank != 1)
        throw IoError(path + ": rows out of order at line " + std::to_string(lineno));
      prev_trigger = static_cast<Id>(trigger);
    } else {
      if (rank != static_cast<std::int64_t>(prev_rank) + 1 || score > prev_score)
        throw IoError(path + ": rank/score order violated at line " + std::to_string(lineno));
    }
    prev_rank = static_cast<std::uint32_t>(rank);
    prev_score = score;
    if (static_cast<std::size_t>(rank) > table.truncation_size)
      throw IoError(path + ": list longer than T at line " + std::to_string(lineno));

    table.entries[static_cast<Id>(trigger)].push_back(
        {static_cast<Id>(target), score, static_cast<std::uint32_t>(rank)});
  }
  return table;
}

}  // namespace pi2i
