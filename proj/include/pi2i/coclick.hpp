#pragma once

#include <algorithm>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "pi2i/common.hpp"
#include "pi2i/corpus.hpp"

namespace pi2i {

inline std::uint64_t pair_key(Id a, Id b) {
  if (a > b) std::swap(a, b);
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

// Co-click statistics over user histories.
//
// users_by_item and items_by_user are exact transposes built from deduplicated
// (user, item) incidences: repeated clicks of one item by one user count once.
// coclick_count holds, per unordered item pair, the number of users for whom
// the pair co-occurs. Without a window that is |U_i ∩ U_j|; with a window only
// pairs clicked within `window` positions of each other in a user's event
// stream co-occur, which bounds the quadratic pair blowup on long histories.
struct CoClickStats {
  std::unordered_map<Id, std::vector<Id>> users_by_item;  // sorted user lists
  std::unordered_map<Id, std::vector<Id>> items_by_user;  // sorted item lists
  std::unordered_map<std::uint64_t, std::uint32_t> coclick_count;

  std::size_t coclicks(Id i, Id j) const {
    auto it = coclick_count.find(pair_key(i, j));
    return it == coclick_count.end() ? 0 : it->second;
  }

  const std::vector<Id>* users_of(Id item) const {
    auto it = users_by_item.find(item);
    return it == users_by_item.end() ? nullptr : &it->second;
  }

  const std::vector<Id>* items_of(Id user) const {
    auto it = items_by_user.find(user);
    return it == items_by_user.end() ? nullptr : &it->second;
  }
};

// Accumulates CoClickStats from histories.
//
// window = 0 means no window: every pair of distinct items a user clicked
// co-occurs. user_item_cap = 0 means uncapped; otherwise only the cap most
// recently clicked distinct items of each user participate at all, which
// doubles as the activity bound motivating the Swing user weighting.
inline CoClickStats accumulate_coclicks(const std::vector<UserHistory>& histories,
                                        std::size_t window = 0, std::size_t user_item_cap = 0) {
  CoClickStats stats;
  for (const auto& h : histories) {
    if (h.events.empty()) continue;

    // Distinct items, most recent occurrence wins when capping.
    std::unordered_map<Id, std::size_t> last_pos;
    for (std::size_t p = 0; p < h.events.size(); ++p) last_pos[h.events[p].item_id] = p;

    std::vector<Id> kept;
    if (user_item_cap > 0 && last_pos.size() > user_item_cap) {
      std::vector<std::pair<std::size_t, Id>> by_recency;
      by_recency.reserve(last_pos.size());
      for (const auto& [item, pos] : last_pos) by_recency.emplace_back(pos, item);
      std::sort(by_recency.begin(), by_recency.end(),
                [](const auto& a, const auto& b) { return a.first > b.first; });
      by_recency.resize(user_item_cap);
      kept.reserve(user_item_cap);
      for (const auto& [_, item] : by_recency) kept.push_back(item);
      std::sort(kept.begin(), kept.end());
    } else {
      kept.reserve(last_pos.size());
      for (const auto& [item, _] : last_pos) kept.push_back(item);
      std::sort(kept.begin(), kept.end());
    }

    auto is_kept = [&](Id item) { return std::binary_search(kept.begin(), kept.end(), item); };

    for (Id item : kept) stats.users_by_item[item].push_back(h.user_id);
    auto& items = stats.items_by_user[h.user_id];
    items.insert(items.end(), kept.begin(), kept.end());

    // Per-user co-click pairs, deduplicated through a local set of keys.
    std::unordered_map<std::uint64_t, bool> seen;
    if (window == 0) {
      for (std::size_t a = 0; a < kept.size(); ++a)
        for (std::size_t b = a + 1; b < kept.size(); ++b)
          seen.emplace(pair_key(kept[a], kept[b]), true);
    } else {
      const auto& ev = h.events;
      for (std::size_t p = 0; p < ev.size(); ++p) {
        if (!is_kept(ev[p].item_id)) continue;
        for (std::size_t q = p + 1; q < ev.size() && q - p <= window; ++q) {
          if (ev[q].item_id == ev[p].item_id || !is_kept(ev[q].item_id)) continue;
          seen.emplace(pair_key(ev[p].item_id, ev[q].item_id), true);
        }
      }
    }
    for (const auto& [key, _] : seen) ++stats.coclick_count[key];
  }
  for (auto& [_, users] : stats.users_by_item) std::sort(users.begin(), users.end());
  return stats;
}

}  // namespace pi2i
