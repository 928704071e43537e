#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "pi2i/common.hpp"
#include "pi2i/corpus.hpp"
#include "pi2i/i2i_table.hpp"

namespace pi2i {

// One (trigger, rank, score) index occurrence of a candidate.
struct Provenance {
  Id trigger = 0;
  std::uint32_t rank = 0;
  double score = 0.0;

  bool operator==(const Provenance&) const = default;
};

using ProvenanceMap = std::map<Id, std::vector<Provenance>>;

// One next-item training instance. Negatives are split by how their triggers
// relate to the positive: hard negatives come from positive triggers' target
// lists, easy negatives only from non-positive triggers' lists.
struct TrainingSample {
  Id user_id = 0;
  std::vector<Id> history;  // trigger list, most recent last
  Id positive_item = 0;
  std::vector<Id> positive_triggers;
  std::vector<Id> hard_negatives;
  std::vector<Id> easy_negatives;
  ProvenanceMap trigger_of;  // candidate -> all index occurrences

  bool operator==(const TrainingSample&) const = default;
};

struct SamplerConfig {
  std::size_t n_hard = 20;
  std::size_t n_easy = 80;
  double hard_bias = 1.0;  // rank weight (L - rank + 1)^hard_bias, favors top ranks
  double easy_bias = 1.0;  // rank weight rank^easy_bias, favors tail ranks
  std::uint64_t seed = 0;
  std::size_t max_seq_len = 50;
};

struct SampleStats {
  std::size_t attempts = 0;
  std::size_t kept = 0;
  std::size_t discarded = 0;
  double mean_positive_triggers = 0.0;
  double mean_hard = 0.0;
  double mean_easy = 0.0;

  double discard_rate() const {
    return attempts == 0 ? 0.0 : static_cast<double>(discarded) / static_cast<double>(attempts);
  }
};

// Per-trigger target lists re-sorted by target id for O(log T) membership
// and provenance lookups. Built once per sampling / retrieval pass.
class TargetIndex {
 public:
  explicit TargetIndex(const I2ITable& table) : table_(&table) {
    for (const auto& [trigger, list] : table.entries) {
      auto& sorted = by_target_[trigger];
      sorted = list;
      std::sort(sorted.begin(), sorted.end(),
                [](const IndexEntry& a, const IndexEntry& b) { return a.target < b.target; });
    }
  }

  const I2ITable& table() const { return *table_; }

  const IndexEntry* find(Id trigger, Id target) const {
    auto it = by_target_.find(trigger);
    if (it == by_target_.end()) return nullptr;
    const auto& v = it->second;
    auto pos = std::lower_bound(v.begin(), v.end(), target,
                                [](const IndexEntry& e, Id t) { return e.target < t; });
    return pos != v.end() && pos->target == target ? &*pos : nullptr;
  }

  const std::vector<IndexEntry>* targets_of(Id trigger) const { return table_->targets_of(trigger); }

 private:
  const I2ITable* table_;
  std::unordered_map<Id, std::vector<IndexEntry>> by_target_;
};

namespace detail {

// Weighted sampling without replacement; weights are recomputed over the
// remaining pool each draw. Candidates must arrive in canonical order so the
// draw sequence is a pure function of (weights, rng stream).
inline std::vector<std::size_t> sample_without_replacement(std::vector<double> weights,
                                                           std::size_t quota, Rng& rng) {
  std::vector<std::size_t> picked;
  std::vector<bool> taken(weights.size(), false);
  while (picked.size() < quota) {
    double total = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i)
      if (!taken[i]) total += weights[i];
    if (total <= 0.0) break;
    double x = rng.next_double() * total;
    double acc = 0.0;
    std::size_t chosen = weights.size();
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (taken[i]) continue;
      acc += weights[i];
      if (x < acc) {
        chosen = i;
        break;
      }
    }
    if (chosen == weights.size()) {  // x landed on the rounding edge
      for (std::size_t i = weights.size(); i-- > 0;)
        if (!taken[i] && weights[i] > 0.0) {
          chosen = i;
          break;
        }
      if (chosen == weights.size()) break;
    }
    taken[chosen] = true;
    picked.push_back(chosen);
  }
  return picked;
}

inline std::vector<Id> distinct_in_order(const std::vector<Id>& items) {
  std::vector<Id> out;
  std::unordered_set<Id> seen;
  for (Id x : items)
    if (seen.insert(x).second) out.push_back(x);
  return out;
}

}  // namespace detail

// Trigger-target negative sampling for one (history, next item) pair.
//
// History items whose target list contains the next item are the positive
// triggers; without at least one the sample is discarded. Hard negatives are
// drawn from positive triggers' lists with weight (L - rank + 1)^hard_bias
// (mass on top ranks), easy negatives from the remaining triggers' lists with
// weight rank^easy_bias (mass on tail ranks), both pooled across lists and
// without replacement. An item reachable from both trigger classes counts as
// hard. Candidates keep their full multi-trigger provenance.
inline std::optional<TrainingSample> make_sample(Id user_id, const std::vector<Id>& history,
                                                 Id next_item, const TargetIndex& index,
                                                 const SamplerConfig& cfg, Rng& rng) {
  if (history.empty()) throw std::invalid_argument("make_sample: empty history");

  TrainingSample sample;
  sample.user_id = user_id;
  if (history.size() > cfg.max_seq_len)
    sample.history.assign(history.end() - static_cast<std::ptrdiff_t>(cfg.max_seq_len),
                          history.end());
  else
    sample.history = history;
  sample.positive_item = next_item;

  const std::vector<Id> triggers = detail::distinct_in_order(sample.history);
  std::unordered_set<Id> positive_set;
  for (Id t : triggers) {
    if (index.find(t, next_item)) {
      sample.positive_triggers.push_back(t);
      positive_set.insert(t);
    }
  }
  if (sample.positive_triggers.empty()) return std::nullopt;

  // Full provenance over every reachable candidate, plus per-class sampling
  // weights. Triggers are visited in history order; per-candidate provenance
  // lists inherit that order.
  ProvenanceMap provenance;
  std::map<Id, double> hard_weight;
  std::map<Id, double> easy_weight;
  for (Id t : triggers) {
    const auto* list = index.targets_of(t);
    if (!list) continue;  // absent from the table: empty target list
    const double len = static_cast<double>(list->size());
    const bool is_positive = positive_set.count(t) > 0;
    for (const auto& e : *list) {
      provenance[e.target].push_back({t, e.rank, e.score});
      if (e.target == next_item) continue;
      if (is_positive)
        hard_weight[e.target] += std::pow(len - static_cast<double>(e.rank) + 1.0, cfg.hard_bias);
      else
        easy_weight[e.target] += std::pow(static_cast<double>(e.rank), cfg.easy_bias);
    }
  }
  // Hard eligibility wins: anything reachable from a positive trigger is
  // never an easy candidate.
  for (const auto& [item, _] : hard_weight) easy_weight.erase(item);

  auto draw = [&](const std::map<Id, double>& weight_by_item, std::size_t quota) {
    std::vector<Id> items;
    std::vector<double> weights;
    items.reserve(weight_by_item.size());
    for (const auto& [item, w] : weight_by_item) {
      items.push_back(item);
      weights.push_back(w);
    }
    std::vector<Id> out;
    if (items.size() <= quota) {
      out = items;  // whole pool, canonical id order
    } else {
      for (std::size_t idx : detail::sample_without_replacement(std::move(weights), quota, rng))
        out.push_back(items[idx]);
    }
    return out;
  };
  sample.hard_negatives = draw(hard_weight, cfg.n_hard);
  sample.easy_negatives = draw(easy_weight, cfg.n_easy);

  sample.trigger_of[next_item] = provenance.at(next_item);
  for (Id c : sample.hard_negatives) sample.trigger_of[c] = provenance.at(c);
  for (Id c : sample.easy_negatives) sample.trigger_of[c] = provenance.at(c);
  return sample;
}

// Runs one sample attempt per (history prefix, next item) pair of every
// training history. Each user draws from an RNG seeded by (seed, user id),
// so the output is independent of scheduling.
inline std::vector<TrainingSample> sample_dataset(const DatasetSplit& split,
                                                  const TargetIndex& index,
                                                  const SamplerConfig& cfg, SampleStats& stats,
                                                  int threads = 1) {
  const auto& histories = split.train_histories;
  std::vector<std::vector<TrainingSample>> per_history(histories.size());
  std::vector<SampleStats> per_chunk_stats(histories.size());

  parallel_chunks(histories.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t h = begin; h < end; ++h) {
      const auto& hist = histories[h];
      Rng rng(derive_seed(cfg.seed, "sampler", static_cast<std::uint64_t>(hist.user_id)));
      SampleStats& st = per_chunk_stats[h];
      std::vector<Id> prefix;
      prefix.reserve(hist.events.size());
      for (std::size_t k = 0; k < hist.events.size(); ++k) {
        const Id item = hist.events[k].item_id;
        if (k >= 1) {
          ++st.attempts;
          auto s = make_sample(hist.user_id, prefix, item, index, cfg, rng);
          if (s) {
            st.mean_positive_triggers += static_cast<double>(s->positive_triggers.size());
            st.mean_hard += static_cast<double>(s->hard_negatives.size());
            st.mean_easy += static_cast<double>(s->easy_negatives.size());
            ++st.kept;
            per_history[h].push_back(std::move(*s));
          } else {
            ++st.discarded;
          }
        }
        prefix.push_back(item);
      }
    }
  });

  stats = SampleStats{};
  std::vector<TrainingSample> samples;
  for (std::size_t h = 0; h < histories.size(); ++h) {
    const SampleStats& st = per_chunk_stats[h];
    stats.attempts += st.attempts;
    stats.kept += st.kept;
    stats.discarded += st.discarded;
    stats.mean_positive_triggers += st.mean_positive_triggers;
    stats.mean_hard += st.mean_hard;
    stats.mean_easy += st.mean_easy;
    for (auto& s : per_history[h]) samples.push_back(std::move(s));
  }
  if (stats.kept > 0) {
    const double kept = static_cast<double>(stats.kept);
    stats.mean_positive_triggers /= kept;
    stats.mean_hard /= kept;
    stats.mean_easy /= kept;
  }
  return samples;
}

// Inspection dump: `user \t positive \t triggers(comma) \t hards(comma) \t easies(comma)`.
inline void save_samples_tsv(const std::vector<TrainingSample>& samples, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write samples file: " + path);
  auto join = [&](const std::vector<Id>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ',';
      s += std::to_string(v[i]);
    }
    return s;
  };
  for (const auto& s : samples)
    out << s.user_id << '\t' << s.positive_item << '\t' << join(s.positive_triggers) << '\t'
        << join(s.hard_negatives) << '\t' << join(s.easy_negatives) << '\n';
}

}  // namespace pi2i
