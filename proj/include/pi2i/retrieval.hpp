#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "pi2i/common.hpp"
#include "pi2i/corpus.hpp"
#include "pi2i/model.hpp"
#include "pi2i/sampler.hpp"

namespace pi2i {

struct RetrievedCandidate {
  Id item = 0;
  std::vector<Provenance> provenance;  // triggers in history first-occurrence order
};

// One scored retrieval query. Candidates are the union of the i2i target
// lists over the history's distinct items, minus items already in the
// history, in ascending item id order.
struct RetrievalRun {
  Id user_id = 0;
  std::vector<Id> query_history;
  std::vector<RetrievedCandidate> candidates;
  std::vector<double> scores;  // parallel to candidates
  std::vector<Id> topk;        // (score desc, item asc)

  const RetrievedCandidate* find_candidate(Id item) const {
    auto it = std::lower_bound(candidates.begin(), candidates.end(), item,
                               [](const RetrievedCandidate& c, Id x) { return c.item < x; });
    return it != candidates.end() && it->item == item ? &*it : nullptr;
  }
};

inline std::vector<RetrievedCandidate> gather_candidates(const TargetIndex& index,
                                                         const std::vector<Id>& history) {
  std::unordered_set<Id> clicked(history.begin(), history.end());
  std::map<Id, std::vector<Provenance>> by_item;
  std::unordered_set<Id> seen_trigger;
  for (Id t : history) {
    if (!seen_trigger.insert(t).second) continue;
    const auto* list = index.targets_of(t);
    if (!list) continue;
    for (const auto& e : *list) {
      if (clicked.count(e.target)) continue;
      by_item[e.target].push_back({t, e.rank, e.score});
    }
  }
  std::vector<RetrievedCandidate> out;
  out.reserve(by_item.size());
  for (auto& [item, prov] : by_item) out.push_back({item, std::move(prov)});
  return out;
}

namespace detail {

inline std::vector<Id> top_k_by_score(const std::vector<RetrievedCandidate>& candidates,
                                      const std::vector<double>& scores, std::size_t k) {
  std::vector<std::size_t> idx(candidates.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] != scores[b] ? scores[a] > scores[b]
                                  : candidates[a].item < candidates[b].item;
  });
  if (idx.size() > k) idx.resize(k);
  std::vector<Id> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(candidates[i].item);
  return out;
}

}  // namespace detail

// Scores the fanned-out candidate set with the model and selects Top-K. A
// candidate reachable from several triggers is scored once with its full
// provenance.
inline RetrievalRun retrieve(const Model& model, const FeatureSource& fs, const TargetIndex& index,
                             Id user, const std::vector<Id>& history, std::size_t k) {
  if (history.empty()) throw std::invalid_argument("retrieve: empty history");
  RetrievalRun run;
  run.user_id = user;
  run.query_history = history;
  run.candidates = gather_candidates(index, history);
  run.scores.resize(run.candidates.size());
  if (!run.candidates.empty()) {
    SeqCache sc = build_seq_cache(model, history);
    for (std::size_t i = 0; i < run.candidates.size(); ++i) {
      CandidateFeatures f = assemble_features(model, fs, user, history, run.candidates[i].item,
                                              run.candidates[i].provenance);
      run.scores[i] = forward_candidate(model, sc, f, nullptr);
    }
  }
  run.topk = detail::top_k_by_score(run.candidates, run.scores, k);
  return run;
}

// Unpersonalized reference ranking: candidates ordered by the sum of their
// provenance swing scores, the classic multi-trigger i2i aggregation. This is
// the IBS-only baseline the scored model is compared against.
inline RetrievalRun retrieve_swing_rank(const TargetIndex& index, Id user,
                                        const std::vector<Id>& history, std::size_t k) {
  if (history.empty()) throw std::invalid_argument("retrieve: empty history");
  RetrievalRun run;
  run.user_id = user;
  run.query_history = history;
  run.candidates = gather_candidates(index, history);
  run.scores.resize(run.candidates.size());
  for (std::size_t i = 0; i < run.candidates.size(); ++i) {
    double s = 0.0;
    for (const auto& p : run.candidates[i].provenance) s += p.score;
    run.scores[i] = s;
  }
  run.topk = detail::top_k_by_score(run.candidates, run.scores, k);
  return run;
}

// HR@K over queries: mean fraction of each query's truth set found in the
// top K. Queries with an empty truth set are excluded (callers report them).
inline double hit_rate(const std::vector<RetrievalRun>& runs,
                       const std::vector<std::set<Id>>& truths, std::size_t k) {
  if (runs.size() != truths.size()) throw std::invalid_argument("hit_rate: runs/truths mismatch");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t q = 0; q < runs.size(); ++q) {
    if (truths[q].empty()) continue;
    const auto& topk = runs[q].topk;
    const std::size_t upto = std::min(k, topk.size());
    std::size_t hits = 0;
    for (std::size_t i = 0; i < upto; ++i) hits += truths[q].count(topk[i]);
    sum += static_cast<double>(hits) / static_cast<double>(truths[q].size());
    ++n;
  }
  if (n == 0) throw std::invalid_argument("hit_rate: no queries with nonempty truth");
  return sum / static_cast<double>(n);
}

struct EvalReport {
  std::vector<std::size_t> k_values;
  std::map<std::size_t, double> hr_at_k;       // scored model
  std::map<std::size_t, double> pool_hr_at_k;  // swing-rank baseline
  double pool_hr_unlimited = 0.0;              // truth coverage of the whole pool
  double mean_candidates = 0.0;
  std::size_t n_queries = 0;
  std::size_t n_empty_truth = 0;
  double empty_candidate_rate = 0.0;
};

struct EvalOutputs {
  EvalReport report;
  std::vector<RetrievalRun> runs;        // scored
  std::vector<RetrievalRun> swing_runs;  // unpersonalized
  std::vector<std::set<Id>> truths;
};

inline std::vector<Id> context_items(const EvalCase& c) {
  std::vector<Id> items;
  items.reserve(c.context.size());
  for (const auto& ev : c.context) items.push_back(ev.item_id);
  return items;
}

// Retrieves and scores every eval case at K = max(k_values); smaller K values
// are prefixes of the same ranking. Queries run independently, so the report
// does not depend on the thread count.
inline EvalOutputs evaluate_cases(const Model& model, const FeatureSource& fs,
                                  const TargetIndex& index, const std::vector<EvalCase>& cases,
                                  std::vector<std::size_t> k_values, int threads = 1) {
  if (cases.empty()) throw std::invalid_argument("evaluate_cases: no eval cases");
  if (k_values.empty()) throw ConfigError("evaluate_cases: empty K list");
  std::sort(k_values.begin(), k_values.end());
  const std::size_t k_max = k_values.back();

  EvalOutputs out;
  out.runs.resize(cases.size());
  out.swing_runs.resize(cases.size());
  out.truths.resize(cases.size());
  parallel_chunks(cases.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t q = begin; q < end; ++q) {
      const std::vector<Id> history = context_items(cases[q]);
      out.runs[q] = retrieve(model, fs, index, cases[q].user_id, history, k_max);
      out.swing_runs[q] = retrieve_swing_rank(index, cases[q].user_id, history, k_max);
      out.truths[q] = {cases[q].target.item_id};
    }
  });

  EvalReport& rep = out.report;
  rep.k_values = k_values;
  rep.n_queries = cases.size();
  std::size_t empty_candidates = 0;
  double cand_sum = 0.0, pool_cover = 0.0;
  for (std::size_t q = 0; q < cases.size(); ++q) {
    cand_sum += static_cast<double>(out.runs[q].candidates.size());
    if (out.runs[q].candidates.empty()) ++empty_candidates;
    std::size_t covered = 0;
    for (Id t : out.truths[q])
      if (out.runs[q].find_candidate(t)) ++covered;
    pool_cover += static_cast<double>(covered) / static_cast<double>(out.truths[q].size());
  }
  rep.mean_candidates = cand_sum / static_cast<double>(cases.size());
  rep.empty_candidate_rate = static_cast<double>(empty_candidates) / static_cast<double>(cases.size());
  rep.pool_hr_unlimited = pool_cover / static_cast<double>(cases.size());
  for (std::size_t k : k_values) {
    rep.hr_at_k[k] = hit_rate(out.runs, out.truths, k);
    rep.pool_hr_at_k[k] = hit_rate(out.swing_runs, out.truths, k);
  }
  return out;
}

// Report TSV: `K \t hr \t pool_hr \t mean_candidates`.
inline void save_eval_tsv(const EvalReport& rep, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write eval report: " + path);
  for (std::size_t k : rep.k_values)
    out << k << '\t' << format_double(rep.hr_at_k.at(k)) << '\t'
        << format_double(rep.pool_hr_at_k.at(k)) << '\t' << format_double(rep.mean_candidates)
        << '\n';
}

struct SweepRow {
  std::size_t truncation = 0;
  double pool_hr = 0.0;  // truth coverage of the untruncated candidate pool
  std::vector<double> hr_at_k;
  std::size_t total_candidates = 0;
};

// Evaluates the pipeline at each truncation size by prefix-truncating the
// base table; base_table must have been built at T >= max(T_values) for the
// sweep to be meaningful.
inline std::vector<SweepRow> sweep_truncation(const Model& model, const FeatureSource& fs,
                                              const I2ITable& base_table,
                                              const std::vector<EvalCase>& cases,
                                              const std::vector<std::size_t>& t_values,
                                              const std::vector<std::size_t>& k_values,
                                              int threads = 1) {
  if (!std::is_sorted(t_values.begin(), t_values.end()))
    throw ConfigError("sweep: T values must be ascending");
  std::vector<SweepRow> rows;
  for (std::size_t t : t_values) {
    I2ITable truncated = base_table.truncated(t);
    TargetIndex index(truncated);
    EvalOutputs ev = evaluate_cases(model, fs, index, cases, k_values, threads);
    SweepRow row;
    row.truncation = t;
    row.pool_hr = ev.report.pool_hr_unlimited;
    for (std::size_t k : ev.report.k_values) row.hr_at_k.push_back(ev.report.hr_at_k.at(k));
    std::size_t total = 0;
    for (const auto& run : ev.runs) total += run.candidates.size();
    row.total_candidates = total;
    rows.push_back(std::move(row));
  }
  return rows;
}

// Sweep TSV: `T \t pool_hr \t hr@K... \t total_candidates`.
inline void save_sweep_tsv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write sweep report: " + path);
  for (const auto& r : rows) {
    out << r.truncation << '\t' << format_double(r.pool_hr);
    for (double hr : r.hr_at_k) out << '\t' << format_double(hr);
    out << '\t' << r.total_candidates << '\n';
  }
}

struct TriggerIndexStats {
  std::map<std::size_t, std::size_t> histogram;  // recency index (1 = most recent) -> hits
  // Per-user histograms for the top users by click count, heaviest first.
  std::vector<std::pair<Id, std::map<std::size_t, std::size_t>>> per_user;
};

// Attributes every hit to one provenance trigger - the entry with the best
// (lowest) index rank, ties resolved toward the most recently clicked trigger
// - and histograms the trigger's recency index in the query history.
inline TriggerIndexStats trigger_index_stats(const std::vector<RetrievalRun>& runs,
                                             const std::vector<std::set<Id>>& truths,
                                             std::size_t top_users = 3) {
  if (runs.size() != truths.size())
    throw std::invalid_argument("trigger_index_stats: runs/truths mismatch");
  TriggerIndexStats stats;
  std::map<Id, std::map<std::size_t, std::size_t>> per_user;
  std::map<Id, std::size_t> clicks_by_user;

  for (std::size_t q = 0; q < runs.size(); ++q) {
    const RetrievalRun& run = runs[q];
    clicks_by_user[run.user_id] += run.query_history.size();
    std::unordered_map<Id, std::size_t> last_pos;
    for (std::size_t i = 0; i < run.query_history.size(); ++i) last_pos[run.query_history[i]] = i;

    for (Id item : run.topk) {
      if (!truths[q].count(item)) continue;
      const RetrievedCandidate* cand = run.find_candidate(item);
      if (!cand || cand->provenance.empty()) continue;
      const Provenance* best = nullptr;
      std::size_t best_pos = 0;
      for (const auto& p : cand->provenance) {
        const std::size_t pos = last_pos.at(p.trigger);
        if (!best || p.rank < best->rank || (p.rank == best->rank && pos > best_pos)) {
          best = &p;
          best_pos = pos;
        }
      }
      const std::size_t recency = run.query_history.size() - best_pos;  // 1 = most recent
      ++stats.histogram[recency];
      ++per_user[run.user_id][recency];
    }
  }

  std::vector<std::pair<Id, std::size_t>> users(clicks_by_user.begin(), clicks_by_user.end());
  std::sort(users.begin(), users.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  for (std::size_t i = 0; i < users.size() && i < top_users; ++i)
    stats.per_user.emplace_back(users[i].first, per_user[users[i].first]);
  return stats;
}

// Stats TSV: `trigger_index \t hit_count`.
inline void save_stats_tsv(const TriggerIndexStats& stats, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write stats report: " + path);
  for (const auto& [index, count] : stats.histogram) out << index << '\t' << count << '\n';
}

inline void save_stats_per_user_tsv(const TriggerIndexStats& stats, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write per-user stats report: " + path);
  for (const auto& [user, hist] : stats.per_user)
    for (const auto& [index, count] : hist) out << user << '\t' << index << '\t' << count << '\n';
}

}  // namespace pi2i
