#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pi2i/checkpoint.hpp"
#include "pi2i/config.hpp"
#include "pi2i/corpus.hpp"
#include "pi2i/i2i_table.hpp"
#include "pi2i/model.hpp"
#include "pi2i/retrieval.hpp"
#include "pi2i/sampler.hpp"
#include "pi2i/swing.hpp"
#include "pi2i/train.hpp"

namespace pi2i {

inline void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " path is empty");
  if (!std::filesystem::exists(path)) throw ConfigError(what + " not found: " + path);
}

inline IndexerConfig indexer_config_from(const PipelineConfig& cfg) {
  IndexerConfig ic;
  ic.alpha = cfg.alpha;
  ic.truncation_size = cfg.truncation_size;
  ic.weighted = cfg.weighted;
  ic.min_score = cfg.min_score;
  ic.exclude_self_pairs = cfg.exclude_self_pairs;
  ic.window = cfg.window;
  ic.user_item_cap = cfg.user_item_cap;
  ic.threads = static_cast<int>(cfg.threads);
  return ic;
}

inline SamplerConfig sampler_config_from(const PipelineConfig& cfg) {
  SamplerConfig sc;
  sc.n_hard = cfg.n_hard;
  sc.n_easy = cfg.n_easy;
  sc.hard_bias = cfg.hard_bias;
  sc.easy_bias = cfg.easy_bias;
  sc.seed = cfg.seed;
  sc.max_seq_len = cfg.max_seq_len;
  return sc;
}

inline TrainConfig train_config_from(const PipelineConfig& cfg) {
  TrainConfig tc;
  tc.learning_rate = cfg.learning_rate;
  tc.batch_size = cfg.batch_size;
  tc.embedding_dim = static_cast<std::int64_t>(cfg.embedding_dim);
  tc.heads = static_cast<std::int64_t>(cfg.heads);
  tc.key_dim = static_cast<std::int64_t>(cfg.key_dim);
  tc.max_seq_len = cfg.max_seq_len;
  tc.epochs = cfg.epochs;
  tc.seed = cfg.seed;
  tc.attention_mode = attention_mode_from(cfg.attention_mode);
  tc.trigger_mode = trigger_mode_from(cfg.trigger_mode);
  tc.literal_eq9 = cfg.literal_eq9;
  tc.query_hidden = static_cast<std::int64_t>(cfg.query_hidden);
  tc.out_hidden1 = static_cast<std::int64_t>(cfg.out_hidden1);
  tc.out_hidden2 = static_cast<std::int64_t>(cfg.out_hidden2);
  tc.side_fields = cfg.side_fields;
  return tc;
}

// Everything a pipeline stage works from; owns the storage the FeatureSource
// points into.
struct PipelineContext {
  PipelineConfig cfg;
  LoadResult data;
  std::vector<UserHistory> histories;
  DatasetSplit split;
  I2ITable table;
  std::optional<TargetIndex> index;
  std::vector<Vocabulary> side_vocabs;
  std::optional<CoClickStats> coclick;
  FeatureSource features;
};

inline PipelineContext load_context(const PipelineConfig& cfg) {
  require_file(cfg.data, "interaction log");
  PipelineContext ctx;
  ctx.cfg = cfg;
  ctx.data = load_interactions(cfg.data, cfg.format == "csv" ? LogFormat::csv : LogFormat::tsv);
  ctx.histories = build_histories(ctx.data.interactions);
  ctx.split = split_leave_last(ctx.histories, cfg.min_len);
  return ctx;
}

// Side-field vocabularies are built over item metadata in ascending item id
// order so the mapping is reproducible from the data file alone.
inline void prepare_features(PipelineContext& ctx, const TrainConfig& tc) {
  ctx.side_vocabs.clear();
  ctx.features = FeatureSource{};
  ctx.features.item_meta = &ctx.data.item_meta;
  ctx.features.side_ids.resize(tc.side_fields.size());
  for (std::size_t field = 0; field < tc.side_fields.size(); ++field) {
    Vocabulary vocab;
    auto& ids = ctx.features.side_ids[field];
    for (Id item = 1; item <= static_cast<Id>(ctx.data.item_vocab.size()); ++item) {
      auto it = ctx.data.item_meta.categorical.find(item);
      if (it == ctx.data.item_meta.categorical.end()) continue;
      auto vit = it->second.find(tc.side_fields[field]);
      if (vit == it->second.end()) continue;
      ids[item] = vocab.add_or_get(vit->second);
    }
    ctx.side_vocabs.push_back(std::move(vocab));
  }
  if (ctx.cfg.use_coclick_feature) {
    ctx.coclick = accumulate_coclicks(ctx.split.train_histories, ctx.cfg.window,
                                      ctx.cfg.user_item_cap);
    ctx.features.coclick = &*ctx.coclick;
  }
}

inline std::uint64_t vocab_hash_of(const PipelineContext& ctx) {
  std::uint64_t h = ctx.data.item_vocab.hash();
  h = splitmix64(h ^ ctx.data.user_vocab.hash());
  for (const auto& v : ctx.side_vocabs) h = splitmix64(h ^ v.hash());
  return h;
}

inline std::vector<std::int64_t> side_vocab_sizes_of(const PipelineContext& ctx) {
  std::vector<std::int64_t> sizes;
  for (const auto& v : ctx.side_vocabs) sizes.push_back(static_cast<std::int64_t>(v.size()));
  return sizes;
}

inline void append_jsonl(const std::string& path, const nlohmann::json& obj) {
  if (path.empty()) return;
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot write report: " + path);
  out << obj.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Subcommand bodies. All of them throw; the CLI maps ConfigError to exit code
// 2 and anything else to 1.

inline void cmd_build_index(const PipelineConfig& cfg) {
  PipelineContext ctx = load_context(cfg);
  ctx.table = build_index(ctx.split.train_histories, indexer_config_from(cfg));
  save_index(ctx.table, cfg.index_path);
  ctx.data.item_vocab.save(cfg.item_vocab_path);
  ctx.data.user_vocab.save(cfg.user_vocab_path);

  const std::size_t items_indexed = ctx.table.entries.size();
  const std::size_t entries = ctx.table.total_entries();
  const double mean_len =
      items_indexed == 0 ? 0.0 : static_cast<double>(entries) / static_cast<double>(items_indexed);
  nlohmann::json stats{{"stage", "build-index"},
                       {"items_indexed", items_indexed},
                       {"entries", entries},
                       {"mean_list_length", mean_len},
                       {"alpha", cfg.alpha},
                       {"truncation_size", cfg.truncation_size},
                       {"weighted", cfg.weighted},
                       {"malformed_rows", ctx.data.warn_count}};
  append_jsonl(cfg.build_stats_path, stats);
  std::fprintf(stderr, "build-index: %zu triggers, %zu entries, mean list length %.2f\n",
               items_indexed, entries, mean_len);
}

inline std::vector<TrainingSample> pipeline_samples(PipelineContext& ctx, SampleStats& stats) {
  require_file(ctx.cfg.index_path, "index file");
  ctx.table = load_index(ctx.cfg.index_path);
  ctx.index.emplace(ctx.table);
  return sample_dataset(ctx.split, *ctx.index, sampler_config_from(ctx.cfg), stats,
                        static_cast<int>(ctx.cfg.threads));
}

inline void cmd_sample(const PipelineConfig& cfg) {
  PipelineContext ctx = load_context(cfg);
  SampleStats stats;
  std::vector<TrainingSample> samples = pipeline_samples(ctx, stats);
  save_samples_tsv(samples, cfg.samples_path);
  nlohmann::json report{{"stage", "sample"},
                        {"attempts", stats.attempts},
                        {"kept", stats.kept},
                        {"discarded", stats.discarded},
                        {"discard_rate", stats.discard_rate()},
                        {"mean_positive_triggers", stats.mean_positive_triggers},
                        {"mean_hard", stats.mean_hard},
                        {"mean_easy", stats.mean_easy}};
  append_jsonl(cfg.build_stats_path, report);
  std::fprintf(stderr, "sample: kept %zu of %zu attempts (discard rate %.4f)\n", stats.kept,
               stats.attempts, stats.discard_rate());
}

inline void cmd_train(const PipelineConfig& cfg) {
  PipelineContext ctx = load_context(cfg);
  SampleStats stats;
  std::vector<TrainingSample> samples = pipeline_samples(ctx, stats);
  std::fprintf(stderr, "train: %zu samples (discard rate %.4f)\n", samples.size(),
               stats.discard_rate());
  if (samples.empty()) throw std::runtime_error("train: sampling produced no training samples");

  TrainConfig tc = train_config_from(cfg);
  prepare_features(ctx, tc);
  Model model = init_model(tc, static_cast<std::int64_t>(ctx.data.item_vocab.size()),
                           static_cast<std::int64_t>(ctx.data.user_vocab.size()),
                           side_vocab_sizes_of(ctx));
  std::vector<EpochLog> log = train(model, ctx.features, samples, static_cast<int>(cfg.threads));
  save_params(model, vocab_hash_of(ctx), cfg.checkpoint_path);
  save_train_log(log, cfg.train_log_path);
  for (const auto& row : log)
    std::fprintf(stderr, "train: epoch %zu mean loss %.6f (%.1fs)\n", row.epoch, row.mean_loss,
                 row.wall_seconds);
}

// Loads the checkpoint and rebuilds the feature source under the checkpoint's
// own model configuration; refuses to run when the data file yields a
// different vocabulary than the model was trained under.
inline Model load_model_checked(PipelineContext& ctx) {
  require_file(ctx.cfg.checkpoint_path, "checkpoint");
  Checkpoint probe = load_params(ctx.cfg.checkpoint_path, 0);
  prepare_features(ctx, probe.model.cfg);
  const std::uint64_t expected = vocab_hash_of(ctx);
  if (probe.vocab_hash != expected)
    throw std::runtime_error(ctx.cfg.checkpoint_path +
                             ": vocabulary hash mismatch between checkpoint and current data");
  return std::move(probe.model);
}

inline EvalOutputs pipeline_evaluate(PipelineContext& ctx, const std::vector<std::size_t>& k_list) {
  require_file(ctx.cfg.index_path, "index file");
  ctx.table = load_index(ctx.cfg.index_path);
  ctx.index.emplace(ctx.table);
  Model model = load_model_checked(ctx);
  if (ctx.split.test_cases.empty()) throw std::runtime_error("no test queries in the split");
  return evaluate_cases(model, ctx.features, *ctx.index, ctx.split.test_cases, k_list,
                        static_cast<int>(ctx.cfg.threads));
}

inline void cmd_evaluate(const PipelineConfig& cfg) {
  PipelineContext ctx = load_context(cfg);
  EvalOutputs ev = pipeline_evaluate(ctx, cfg.k_list);
  save_eval_tsv(ev.report, cfg.eval_report_path);
  for (std::size_t k : ev.report.k_values)
    std::fprintf(stderr, "evaluate: HR@%zu %.6f (pool %.6f)\n", k, ev.report.hr_at_k.at(k),
                 ev.report.pool_hr_at_k.at(k));
  std::fprintf(stderr, "evaluate: pool coverage %.6f over %zu queries, mean candidates %.1f\n",
               ev.report.pool_hr_unlimited, ev.report.n_queries, ev.report.mean_candidates);
}

inline void cmd_retrieve(const PipelineConfig& cfg) {
  PipelineContext ctx = load_context(cfg);
  EvalOutputs ev = pipeline_evaluate(ctx, cfg.k_list);
  std::ofstream out(cfg.retrieve_path, std::ios::binary);
  if (!out) throw IoError("cannot write retrieval dump: " + cfg.retrieve_path);
  for (const auto& run : ev.runs) {
    for (std::size_t r = 0; r < run.topk.size(); ++r) {
      const Id item = run.topk[r];
      const double score = run.scores[static_cast<std::size_t>(
          std::distance(run.candidates.begin(),
                        std::lower_bound(run.candidates.begin(), run.candidates.end(), item,
                                         [](const RetrievedCandidate& c, Id x) { return c.item < x; })))];
      out << run.user_id << '\t' << (r + 1) << '\t' << item << '\t' << format_double(score) << '\n';
    }
  }
  std::fprintf(stderr, "retrieve: wrote top-%zu lists for %zu queries\n",
               cfg.k_list.empty() ? 0 : cfg.k_list.back(), ev.runs.size());
}

inline void cmd_sweep(const PipelineConfig& cfg) {
  PipelineContext ctx = load_context(cfg);
  require_file(cfg.index_path, "index file");
  ctx.table = load_index(cfg.index_path);
  Model model = load_model_checked(ctx);
  if (ctx.split.test_cases.empty()) throw std::runtime_error("no test queries in the split");
  std::vector<SweepRow> rows = sweep_truncation(model, ctx.features, ctx.table,
                                                ctx.split.test_cases, cfg.sweep_t, cfg.k_list,
                                                static_cast<int>(cfg.threads));
  save_sweep_tsv(rows, cfg.sweep_report_path);
  for (const auto& r : rows)
    std::fprintf(stderr, "sweep: T=%zu pool_hr %.6f total_candidates %zu\n", r.truncation,
                 r.pool_hr, r.total_candidates);
}

inline void cmd_stats(const PipelineConfig& cfg) {
  PipelineContext ctx = load_context(cfg);
  EvalOutputs ev = pipeline_evaluate(ctx, {cfg.stats_k});
  TriggerIndexStats stats = trigger_index_stats(ev.runs, ev.truths, cfg.stats_top_users);
  save_stats_tsv(stats, cfg.stats_path);
  save_stats_per_user_tsv(stats, cfg.stats_per_user_path);
  std::size_t total = 0;
  for (const auto& [_, n] : stats.histogram) total += n;
  std::fprintf(stderr, "stats: %zu attributed hits over %zu queries\n", total, ev.runs.size());
}

}  // namespace pi2i
