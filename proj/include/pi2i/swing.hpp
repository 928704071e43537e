#pragma once

#include <algorithm>
#include <cmath>
#include <mutex>
#include <unordered_map>
#include <vector>

#include "pi2i/coclick.hpp"
#include "pi2i/common.hpp"
#include "pi2i/i2i_table.hpp"

namespace pi2i {

struct IndexerConfig {
  double alpha = 1.0;
  std::size_t truncation_size = 1250;
  bool weighted = true;
  double min_score = 0.0;
  // The swing double sum runs over all ordered user pairs including u = v by
  // default; this flag switches to the u != v variant.
  bool exclude_self_pairs = false;
  std::size_t window = 0;         // 0 = whole history co-occurs
  std::size_t user_item_cap = 500;  // 0 = uncapped
  int threads = 1;
};

namespace detail {

inline std::size_t sorted_intersection_size(const std::vector<Id>& a, const std::vector<Id>& b) {
  std::size_t n = 0, i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j])
      ++i;
    else if (b[j] < a[i])
      ++j;
    else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

inline std::vector<Id> sorted_intersection(const std::vector<Id>& a, const std::vector<Id>& b) {
  std::vector<Id> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

// Shared pair term accumulation. `shared_users` must be sorted; iteration
// order is fixed (u ascending, then v ascending) so the floating-point sum is
// identical no matter where it is computed from.
template <typename OverlapFn>
double swing_sum(const std::vector<Id>& shared_users, const CoClickStats& stats, double alpha,
                 bool weighted, bool exclude_self_pairs, OverlapFn&& overlap) {
  double sum = 0.0;
  for (Id u : shared_users) {
    const auto* items_u = stats.items_of(u);
    const double w_u = weighted && items_u ? 1.0 / std::sqrt(static_cast<double>(items_u->size()))
                                           : 1.0;
    for (Id v : shared_users) {
      if (exclude_self_pairs && u == v) continue;
      const auto* items_v = stats.items_of(v);
      const double w_v = weighted && items_v ? 1.0 / std::sqrt(static_cast<double>(items_v->size()))
                                             : 1.0;
      sum += w_u * w_v / (alpha + static_cast<double>(overlap(u, v)));
    }
  }
  return sum;
}

}  // namespace detail

// Swing similarity between two distinct items:
//   s(i,j) = sum over user pairs (u,v) of U_i ∩ U_j of w_u * w_v / (alpha + |I_u ∩ I_v|)
// with w_u = 1/sqrt(|I_u|) when weighted and 1 otherwise. Symmetric in (i, j).
inline double swing_score(Id i, Id j, const CoClickStats& stats, double alpha, bool weighted,
                          bool exclude_self_pairs = false) {
  if (alpha <= 0.0) throw ConfigError("swing_score: alpha must be positive");
  if (i == j) throw std::invalid_argument("swing_score: self-similarity is undefined");
  const auto* users_i = stats.users_of(i);
  const auto* users_j = stats.users_of(j);
  if (!users_i || !users_j) return 0.0;
  std::vector<Id> shared = detail::sorted_intersection(*users_i, *users_j);
  if (shared.empty()) return 0.0;
  return detail::swing_sum(shared, stats, alpha, weighted, exclude_self_pairs, [&](Id u, Id v) {
    if (u == v) return stats.items_of(u)->size();
    return detail::sorted_intersection_size(*stats.items_of(u), *stats.items_of(v));
  });
}

// Builds the truncated i2i table: per trigger, the top-T co-clicked partners
// by (swing score desc, item id asc) with score > 0 and >= min_score.
//
// Rows are computed independently per trigger, so the result does not depend
// on the thread count. Both directions of a pair iterate the same sorted
// shared-user set and therefore produce bit-identical scores.
inline I2ITable build_index_from_stats(const CoClickStats& stats, const IndexerConfig& cfg) {
  if (cfg.truncation_size < 1) throw ConfigError("build_index: truncation_size must be >= 1");
  if (cfg.alpha <= 0.0) throw ConfigError("build_index: alpha must be positive");

  // Partner lists per trigger, from the co-click pair set (both directions).
  std::unordered_map<Id, std::vector<Id>> partners;
  for (const auto& [key, _] : stats.coclick_count) {
    const Id a = static_cast<Id>(key >> 32);
    const Id b = static_cast<Id>(key & 0xffffffffu);
    partners[a].push_back(b);
    partners[b].push_back(a);
  }
  std::vector<Id> triggers;
  triggers.reserve(partners.size());
  for (auto& [trigger, list] : partners) {
    std::sort(list.begin(), list.end());
    triggers.push_back(trigger);
  }
  std::sort(triggers.begin(), triggers.end());

  std::vector<std::vector<IndexEntry>> rows(triggers.size());
  parallel_chunks(triggers.size(), cfg.threads, [&](std::size_t begin, std::size_t end) {
    // Overlap sizes |I_u ∩ I_v| repeat across a trigger's partners; cache
    // them per chunk. Values are exact, so caching cannot change results.
    std::unordered_map<std::uint64_t, std::size_t> overlap_cache;
    auto overlap = [&](Id u, Id v) -> std::size_t {
      if (u == v) return stats.items_of(u)->size();
      const std::uint64_t key = pair_key(u, v);
      auto it = overlap_cache.find(key);
      if (it != overlap_cache.end()) return it->second;
      std::size_t n = detail::sorted_intersection_size(*stats.items_of(u), *stats.items_of(v));
      overlap_cache.emplace(key, n);
      return n;
    };

    for (std::size_t t = begin; t < end; ++t) {
      const Id trigger = triggers[t];
      const auto* users_i = stats.users_of(trigger);
      if (!users_i) continue;
      std::vector<IndexEntry> scored;
      for (Id target : partners[trigger]) {
        const auto* users_j = stats.users_of(target);
        if (!users_j) continue;
        std::vector<Id> shared = detail::sorted_intersection(*users_i, *users_j);
        if (shared.empty()) continue;
        double s = detail::swing_sum(shared, stats, cfg.alpha, cfg.weighted,
                                     cfg.exclude_self_pairs, overlap);
        if (s > 0.0 && s >= cfg.min_score) scored.push_back({target, s, 0});
      }
      std::sort(scored.begin(), scored.end(), [](const IndexEntry& a, const IndexEntry& b) {
        return a.score != b.score ? a.score > b.score : a.target < b.target;
      });
      if (scored.size() > cfg.truncation_size) scored.resize(cfg.truncation_size);
      for (std::size_t r = 0; r < scored.size(); ++r) scored[r].rank = static_cast<std::uint32_t>(r + 1);
      rows[t] = std::move(scored);
    }
  });

  I2ITable table;
  table.truncation_size = cfg.truncation_size;
  table.alpha = cfg.alpha;
  table.weighted = cfg.weighted;
  for (std::size_t t = 0; t < triggers.size(); ++t)
    if (!rows[t].empty()) table.entries.emplace(triggers[t], std::move(rows[t]));
  return table;
}

inline I2ITable build_index(const std::vector<UserHistory>& histories, const IndexerConfig& cfg) {
  CoClickStats stats = accumulate_coclicks(histories, cfg.window, cfg.user_item_cap);
  return build_index_from_stats(stats, cfg);
}

}  // namespace pi2i
