#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pi2i/coclick.hpp"
#include "pi2i/common.hpp"
#include "pi2i/corpus.hpp"
#include "pi2i/sampler.hpp"
#include "pi2i/tensor.hpp"

namespace pi2i {

enum class AttentionMode { target, self };
enum class TriggerMode { multi, single_random, none };

inline std::string to_string(AttentionMode m) { return m == AttentionMode::target ? "target" : "self"; }
inline std::string to_string(TriggerMode m) {
  switch (m) {
    case TriggerMode::multi: return "multi";
    case TriggerMode::single_random: return "single_random";
    default: return "none";
  }
}

inline AttentionMode attention_mode_from(std::string_view s) {
  if (s == "target") return AttentionMode::target;
  if (s == "self") return AttentionMode::self;
  throw ConfigError("unknown attention_mode: " + std::string(s));
}

inline TriggerMode trigger_mode_from(std::string_view s) {
  if (s == "multi") return TriggerMode::multi;
  if (s == "single_random") return TriggerMode::single_random;
  if (s == "none") return TriggerMode::none;
  throw ConfigError("unknown trigger_mode: " + std::string(s));
}

struct TrainConfig {
  double learning_rate = 0.01;
  std::size_t batch_size = 512;
  std::int64_t embedding_dim = 64;
  std::int64_t heads = 2;
  std::int64_t key_dim = 0;  // 0 -> embedding_dim / heads, at least 1
  std::size_t max_seq_len = 50;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  AttentionMode attention_mode = AttentionMode::target;
  TriggerMode trigger_mode = TriggerMode::multi;
  // Scaled dot-product attention by default; the flag reproduces the variant
  // that applies the softmax unscaled and divides the pooled output by
  // sqrt(key_dim) instead.
  bool literal_eq9 = false;
  std::int64_t query_hidden = 0;  // 0 -> 2 * embedding_dim
  std::int64_t out_hidden1 = 128;
  std::int64_t out_hidden2 = 64;
  std::vector<std::string> side_fields;  // categorical item fields to embed
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::int64_t effective_key_dim() const {
    if (key_dim > 0) return key_dim;
    return std::max<std::int64_t>(1, embedding_dim / std::max<std::int64_t>(1, heads));
  }
  std::int64_t effective_query_hidden() const {
    return query_hidden > 0 ? query_hidden : 2 * embedding_dim;
  }

  bool operator==(const TrainConfig&) const = default;
};

// Cross-feature bucket slots, in concatenation order.
enum CrossSlot : std::size_t {
  kCrossPriceDiff = 0,
  kCrossCoClick = 1,
  kCrossRank = 2,
  kCrossSwing = 3,
  kCrossTriggerCount = 4,
};
inline constexpr std::size_t kNumCrossSlots = 5;
inline constexpr std::int64_t kNumBuckets = 16;  // bucket 0 = missing / OOV

// Logarithmic bucketizers. Bucket 0 always means "missing"; real values land
// in 1..15.
inline Id bucket_count(std::uint64_t v) {
  if (v == 0) return 0;
  Id b = 1;
  while (v > 1 && b < 15) {
    v >>= 1;
    ++b;
  }
  return b;
}

inline Id bucket_score(double s) {
  if (!(s > 0.0)) return 0;
  const double b = 1.0 + std::floor(2.0 * (std::log10(s) + 6.0));
  return static_cast<Id>(std::clamp(b, 1.0, 15.0));
}

inline Id bucket_price_diff(double diff) {
  const double mag = std::floor(std::log2(1.0 + std::abs(diff)));
  const double sign = diff < 0.0 ? -1.0 : (diff > 0.0 ? 1.0 : 0.0);
  return static_cast<Id>(std::clamp(8.0 + sign * std::min(7.0, mag), 1.0, 15.0));
}

struct ModelDims {
  std::int64_t d = 0;
  std::int64_t heads = 0;
  std::int64_t d_k = 0;
  std::int64_t q_hidden = 0;
  std::int64_t out_hidden1 = 0;
  std::int64_t out_hidden2 = 0;
  std::int64_t n_items = 0;  // dense item ids run 1..n_items; row 0 is OOV
  std::int64_t n_users = 0;
  std::vector<std::int64_t> side_vocab_sizes;

  std::int64_t n_side() const { return static_cast<std::int64_t>(side_vocab_sizes.size()); }
  std::int64_t trigger_width() const { return d * (1 + n_side()); }
  std::int64_t target_width() const { return d * (1 + n_side()); }
  std::int64_t cross_width() const { return static_cast<std::int64_t>(kNumCrossSlots) * d; }
  std::int64_t query_in() const { return trigger_width() + target_width() + cross_width(); }
  std::int64_t attn_out() const { return heads * d_k; }
  std::int64_t out_in() const { return attn_out() + d + query_in(); }

  bool operator==(const ModelDims&) const = default;
};

struct ModelParams {
  Tensor item_emb;                  // (n_items + 1) x d
  Tensor user_emb;                  // (n_users + 1) x d
  std::vector<Tensor> side_emb;     // per field: (vocab + 1) x d
  std::array<Tensor, kNumCrossSlots> cross_emb;  // 16 x d each
  Tensor q_w0, q_b0;                // query_in -> q_hidden
  Tensor q_w1, q_b1;                // q_hidden -> heads * d_k
  std::vector<Tensor> attn_wk;      // per head: d x d_k
  std::vector<Tensor> attn_wv;      // per head: d x d_k
  std::vector<Tensor> attn_wq_self; // per head: d x d_k (self-attention ablation)
  Tensor o_w0, o_b0;                // out_in -> out_hidden1
  Tensor o_w1, o_b1;                // out_hidden1 -> out_hidden2
  Tensor o_w2, o_b2;                // out_hidden2 -> 1

  // Fixed enumeration order; checkpoints, Adam state and the finite-difference
  // harness all rely on it.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    fn("item_emb", item_emb);
    fn("user_emb", user_emb);
    for (std::size_t i = 0; i < side_emb.size(); ++i)
      fn("side_emb." + std::to_string(i), side_emb[i]);
    static const char* cross_names[kNumCrossSlots] = {"cross_emb.price_diff", "cross_emb.coclick",
                                                      "cross_emb.rank", "cross_emb.swing",
                                                      "cross_emb.trigger_count"};
    for (std::size_t i = 0; i < kNumCrossSlots; ++i) fn(cross_names[i], cross_emb[i]);
    fn("q_w0", q_w0);
    fn("q_b0", q_b0);
    fn("q_w1", q_w1);
    fn("q_b1", q_b1);
    for (std::size_t h = 0; h < attn_wk.size(); ++h) fn("attn_wk." + std::to_string(h), attn_wk[h]);
    for (std::size_t h = 0; h < attn_wv.size(); ++h) fn("attn_wv." + std::to_string(h), attn_wv[h]);
    for (std::size_t h = 0; h < attn_wq_self.size(); ++h)
      fn("attn_wq_self." + std::to_string(h), attn_wq_self[h]);
    fn("o_w0", o_w0);
    fn("o_b0", o_b0);
    fn("o_w1", o_w1);
    fn("o_b1", o_b1);
    fn("o_w2", o_w2);
    fn("o_b2", o_b2);
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<ModelParams*>(this)->for_each_tensor(
        [&](const std::string& name, Tensor& t) { fn(name, static_cast<const Tensor&>(t)); });
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  bool operator==(const ModelParams&) const = default;
};

inline ModelParams make_params(const ModelDims& dims) {
  ModelParams p;
  p.item_emb = Tensor(dims.n_items + 1, dims.d);
  p.user_emb = Tensor(dims.n_users + 1, dims.d);
  for (std::int64_t v : dims.side_vocab_sizes) p.side_emb.emplace_back(v + 1, dims.d);
  for (auto& t : p.cross_emb) t = Tensor(kNumBuckets, dims.d);
  p.q_w0 = Tensor(dims.query_in(), dims.q_hidden);
  p.q_b0 = Tensor(1, dims.q_hidden);
  p.q_w1 = Tensor(dims.q_hidden, dims.attn_out());
  p.q_b1 = Tensor(1, dims.attn_out());
  for (std::int64_t h = 0; h < dims.heads; ++h) {
    p.attn_wk.emplace_back(dims.d, dims.d_k);
    p.attn_wv.emplace_back(dims.d, dims.d_k);
    p.attn_wq_self.emplace_back(dims.d, dims.d_k);
  }
  p.o_w0 = Tensor(dims.out_in(), dims.out_hidden1);
  p.o_b0 = Tensor(1, dims.out_hidden1);
  p.o_w1 = Tensor(dims.out_hidden1, dims.out_hidden2);
  p.o_b1 = Tensor(1, dims.out_hidden2);
  p.o_w2 = Tensor(dims.out_hidden2, 1);
  p.o_b2 = Tensor(1, 1);
  return p;
}

struct Model {
  TrainConfig cfg;
  ModelDims dims;
  ModelParams params;
};

inline ModelDims make_dims(const TrainConfig& cfg, std::int64_t n_items, std::int64_t n_users,
                           std::vector<std::int64_t> side_vocab_sizes = {}) {
  if (cfg.embedding_dim < 1 || cfg.heads < 1) throw ConfigError("model: bad embedding_dim/heads");
  if (side_vocab_sizes.size() != cfg.side_fields.size())
    throw ConfigError("model: side vocab count does not match side_fields");
  ModelDims dims;
  dims.d = cfg.embedding_dim;
  dims.heads = cfg.heads;
  dims.d_k = cfg.effective_key_dim();
  dims.q_hidden = cfg.effective_query_hidden();
  dims.out_hidden1 = cfg.out_hidden1;
  dims.out_hidden2 = cfg.out_hidden2;
  dims.n_items = n_items;
  dims.n_users = n_users;
  dims.side_vocab_sizes = std::move(side_vocab_sizes);
  return dims;
}

// Embeddings start uniform in [-1/sqrt(d), 1/sqrt(d)], dense layers fan-in
// scaled uniform, biases zero.
inline Model init_model(const TrainConfig& cfg, std::int64_t n_items, std::int64_t n_users,
                        std::vector<std::int64_t> side_vocab_sizes = {}) {
  Model m;
  m.cfg = cfg;
  m.dims = make_dims(cfg, n_items, n_users, std::move(side_vocab_sizes));
  m.params = make_params(m.dims);
  Rng rng(derive_seed(cfg.seed, "init"));
  const double emb_range = 1.0 / std::sqrt(static_cast<double>(m.dims.d));
  m.params.for_each_tensor([&](const std::string& name, Tensor& t) {
    const bool is_bias = name.find("_b") != std::string::npos;
    const bool is_emb = name.find("emb") != std::string::npos;
    if (is_bias) return;  // stays zero
    const double range = is_emb ? emb_range : 1.0 / std::sqrt(static_cast<double>(t.rows));
    for (double& x : t.a) x = rng.uniform(-range, range);
  });
  return m;
}

// ---------------------------------------------------------------------------
// Feature assembly.

// Optional per-item data feeding the cross features and side-info embeddings.
// Everything here may be absent; missing values land in bucket / row 0.
struct FeatureSource {
  const ItemMeta* item_meta = nullptr;
  // Per configured side field: item -> dense side-value id.
  std::vector<std::unordered_map<Id, Id>> side_ids;
  // Optional (trigger, target) co-click counts from the index-building stage.
  const CoClickStats* coclick = nullptr;

  Id side_id(std::size_t field, Id item) const {
    if (field >= side_ids.size()) return kOovId;
    auto it = side_ids[field].find(item);
    return it == side_ids[field].end() ? kOovId : it->second;
  }
};

// Everything forward() needs about one candidate, resolved to table rows.
struct CandidateFeatures {
  Id user = 0;
  Id target = 0;
  std::vector<Id> trigger_items;            // after trigger_mode selection
  std::array<Id, kNumCrossSlots> cross{};   // bucket ids
  std::vector<Id> seq;                      // attention sequence, oldest first
  std::vector<Id> target_side;              // per field
  std::vector<std::vector<Id>> trigger_side;  // per field, aligned with trigger_items
};

namespace detail {

// Best provenance entry: lowest index rank, ties resolved toward the trigger
// clicked most recently.
inline const Provenance* best_provenance(const std::vector<Provenance>& prov,
                                         const std::vector<Id>& history) {
  std::unordered_map<Id, std::size_t> last_pos;
  for (std::size_t i = 0; i < history.size(); ++i) last_pos[history[i]] = i;
  const Provenance* best = nullptr;
  std::size_t best_pos = 0;
  for (const auto& p : prov) {
    const std::size_t pos = last_pos.count(p.trigger) ? last_pos.at(p.trigger) : 0;
    if (!best || p.rank < best->rank || (p.rank == best->rank && pos > best_pos)) {
      best = &p;
      best_pos = pos;
    }
  }
  return best;
}

}  // namespace detail

inline CandidateFeatures assemble_features(const Model& model, const FeatureSource& fs, Id user,
                                           const std::vector<Id>& history, Id candidate,
                                           const std::vector<Provenance>& provenance) {
  const TrainConfig& cfg = model.cfg;
  CandidateFeatures f;
  f.user = user;
  f.target = candidate;

  if (history.size() > cfg.max_seq_len)
    f.seq.assign(history.end() - static_cast<std::ptrdiff_t>(cfg.max_seq_len), history.end());
  else
    f.seq = history;

  // Trigger selection by mode.
  std::vector<Id> triggers;
  triggers.reserve(provenance.size());
  for (const auto& p : provenance) triggers.push_back(p.trigger);
  std::uint64_t count = triggers.size();
  switch (cfg.trigger_mode) {
    case TriggerMode::multi:
      f.trigger_items = std::move(triggers);
      break;
    case TriggerMode::single_random:
      if (!triggers.empty()) {
        const std::uint64_t h = derive_seed(cfg.seed, "trigger_pick",
                                            (static_cast<std::uint64_t>(static_cast<std::uint32_t>(user)) << 32) ^
                                                static_cast<std::uint32_t>(candidate));
        f.trigger_items.push_back(triggers[h % triggers.size()]);
        count = 1;
      }
      break;
    case TriggerMode::none:
      count = 0;
      break;
  }

  // Cross features from provenance and item metadata.
  std::uint32_t best_rank = 0;
  double best_score = 0.0;
  for (const auto& p : provenance) {
    if (best_rank == 0 || p.rank < best_rank) best_rank = p.rank;
    best_score = std::max(best_score, p.score);
  }
  f.cross[kCrossRank] = bucket_count(best_rank);
  f.cross[kCrossSwing] = bucket_score(best_score);
  f.cross[kCrossTriggerCount] = bucket_count(count);

  f.cross[kCrossPriceDiff] = 0;
  f.cross[kCrossCoClick] = 0;
  if (const Provenance* best = detail::best_provenance(provenance, history)) {
    if (fs.item_meta) {
      const double* tp = fs.item_meta->find_price(candidate);
      const double* bp = fs.item_meta->find_price(best->trigger);
      if (tp && bp) f.cross[kCrossPriceDiff] = bucket_price_diff(*tp - *bp);
    }
    if (fs.coclick)
      f.cross[kCrossCoClick] = bucket_count(fs.coclick->coclicks(best->trigger, candidate));
  }

  for (std::size_t field = 0; field < cfg.side_fields.size(); ++field) {
    f.target_side.push_back(fs.side_id(field, candidate));
    std::vector<Id> per_trigger;
    for (Id t : f.trigger_items) per_trigger.push_back(fs.side_id(field, t));
    f.trigger_side.push_back(std::move(per_trigger));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Forward / backward.

namespace detail {

inline const double* emb_row(const Tensor& table, Id id) {
  if (id < 1 || id >= table.rows) id = kOovId;
  return table.row(id);
}

inline std::int64_t emb_row_index(const Tensor& table, Id id) {
  return (id < 1 || id >= table.rows) ? kOovId : id;
}

}  // namespace detail

// Per-sample state shared by all candidates: the embedded behavior sequence
// and its per-head key/value (and self-query) projections.
struct SeqCache {
  std::vector<Id> seq;
  Tensor e_seq;               // L x d
  std::vector<Tensor> K, V;   // per head: L x d_k
  std::vector<Tensor> Qs;     // per head: L x d_k, self mode only
};

inline SeqCache build_seq_cache(const Model& m, const std::vector<Id>& history) {
  if (history.empty()) throw std::invalid_argument("forward: empty behavior sequence");
  const ModelDims& dims = m.dims;
  SeqCache c;
  if (history.size() > m.cfg.max_seq_len)
    c.seq.assign(history.end() - static_cast<std::ptrdiff_t>(m.cfg.max_seq_len), history.end());
  else
    c.seq = history;
  const std::int64_t L = static_cast<std::int64_t>(c.seq.size());
  c.e_seq = Tensor(L, dims.d);
  for (std::int64_t l = 0; l < L; ++l) {
    const double* row = detail::emb_row(m.params.item_emb, c.seq[static_cast<std::size_t>(l)]);
    std::copy(row, row + dims.d, c.e_seq.row(l));
  }
  const bool self_mode = m.cfg.attention_mode == AttentionMode::self;
  for (std::int64_t h = 0; h < dims.heads; ++h) {
    Tensor K(L, dims.d_k), V(L, dims.d_k);
    for (std::int64_t l = 0; l < L; ++l) {
      lin::matvec(m.params.attn_wk[static_cast<std::size_t>(h)], c.e_seq.row(l), K.row(l));
      lin::matvec(m.params.attn_wv[static_cast<std::size_t>(h)], c.e_seq.row(l), V.row(l));
    }
    c.K.push_back(std::move(K));
    c.V.push_back(std::move(V));
    if (self_mode) {
      Tensor Q(L, dims.d_k);
      for (std::int64_t l = 0; l < L; ++l)
        lin::matvec(m.params.attn_wq_self[static_cast<std::size_t>(h)], c.e_seq.row(l), Q.row(l));
      c.Qs.push_back(std::move(Q));
    }
  }
  return c;
}

// Intermediate values kept for the backward pass of one candidate.
struct CandidateTrace {
  CandidateFeatures feats;
  std::vector<double> x_q, h_q_pre, h_q, q_all;
  std::vector<std::vector<double>> attn;       // target mode: per head, length L
  std::vector<Tensor> attn_self;               // self mode: per head, L x L row-softmax
  std::vector<double> mha;
  std::vector<double> x_o, h1_pre, h1, h2_pre, h2;
  double logit = 0.0;
};

// Assembles E_trigger ⊕ E_target ⊕ E_cross for one candidate.
inline std::vector<double> build_query_input(const Model& m, const CandidateFeatures& f) {
  const ModelDims& dims = m.dims;
  std::vector<double> x(static_cast<std::size_t>(dims.query_in()), 0.0);
  double* out = x.data();

  // E_trigger: mean item embedding, then per-field mean side embeddings.
  if (!f.trigger_items.empty()) {
    const double inv = 1.0 / static_cast<double>(f.trigger_items.size());
    for (Id t : f.trigger_items) {
      const double* row = detail::emb_row(m.params.item_emb, t);
      for (std::int64_t i = 0; i < dims.d; ++i) out[i] += row[i] * inv;
    }
    for (std::int64_t field = 0; field < dims.n_side(); ++field) {
      double* dst = out + dims.d * (1 + field);
      for (Id sid : f.trigger_side[static_cast<std::size_t>(field)]) {
        const double* row = detail::emb_row(m.params.side_emb[static_cast<std::size_t>(field)], sid);
        for (std::int64_t i = 0; i < dims.d; ++i) dst[i] += row[i] * inv;
      }
    }
  }
  out += dims.trigger_width();

  // E_target.
  {
    const double* row = detail::emb_row(m.params.item_emb, f.target);
    std::copy(row, row + dims.d, out);
    for (std::int64_t field = 0; field < dims.n_side(); ++field) {
      const double* srow = detail::emb_row(m.params.side_emb[static_cast<std::size_t>(field)],
                                           f.target_side[static_cast<std::size_t>(field)]);
      std::copy(srow, srow + dims.d, out + dims.d * (1 + field));
    }
  }
  out += dims.target_width();

  // E_cross.
  for (std::size_t slot = 0; slot < kNumCrossSlots; ++slot) {
    const double* row = detail::emb_row(m.params.cross_emb[slot], f.cross[slot]);
    std::copy(row, row + dims.d, out + static_cast<std::int64_t>(slot) * dims.d);
  }
  return x;
}

inline double forward_candidate(const Model& m, const SeqCache& sc, const CandidateFeatures& f,
                                CandidateTrace* trace) {
  const ModelDims& dims = m.dims;
  const std::int64_t L = static_cast<std::int64_t>(sc.seq.size());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dims.d_k));

  std::vector<double> x_q = build_query_input(m, f);

  std::vector<double> h_pre(static_cast<std::size_t>(dims.q_hidden));
  lin::linear_forward(m.params.q_w0, m.params.q_b0, x_q.data(), h_pre.data());
  std::vector<double> h(h_pre);
  lin::relu_forward(h_pre.data(), h.data(), dims.q_hidden);
  std::vector<double> q_all(static_cast<std::size_t>(dims.attn_out()));
  lin::linear_forward(m.params.q_w1, m.params.q_b1, h.data(), q_all.data());

  std::vector<double> mha(static_cast<std::size_t>(dims.attn_out()), 0.0);
  std::vector<std::vector<double>> attn_weights;
  std::vector<Tensor> attn_self;
  for (std::int64_t head = 0; head < dims.heads; ++head) {
    const Tensor& K = sc.K[static_cast<std::size_t>(head)];
    const Tensor& V = sc.V[static_cast<std::size_t>(head)];
    double* out = mha.data() + head * dims.d_k;
    if (m.cfg.attention_mode == AttentionMode::target) {
      const double* q = q_all.data() + head * dims.d_k;
      std::vector<double> z(static_cast<std::size_t>(L));
      for (std::int64_t l = 0; l < L; ++l) {
        z[static_cast<std::size_t>(l)] = lin::dot(q, K.row(l), dims.d_k);
        if (!m.cfg.literal_eq9) z[static_cast<std::size_t>(l)] *= scale;
      }
      lin::softmax_inplace(z);
      for (std::int64_t l = 0; l < L; ++l)
        for (std::int64_t i = 0; i < dims.d_k; ++i) out[i] += z[static_cast<std::size_t>(l)] * V.at(l, i);
      if (m.cfg.literal_eq9)
        for (std::int64_t i = 0; i < dims.d_k; ++i) out[i] *= scale;
      attn_weights.push_back(std::move(z));
    } else {
      const Tensor& Qs = sc.Qs[static_cast<std::size_t>(head)];
      Tensor A(L, L);
      for (std::int64_t r = 0; r < L; ++r) {
        std::vector<double> z(static_cast<std::size_t>(L));
        for (std::int64_t l = 0; l < L; ++l) {
          z[static_cast<std::size_t>(l)] = lin::dot(Qs.row(r), K.row(l), dims.d_k);
          if (!m.cfg.literal_eq9) z[static_cast<std::size_t>(l)] *= scale;
        }
        lin::softmax_inplace(z);
        std::copy(z.begin(), z.end(), A.row(r));
      }
      // Mean-pool attended rows into one vector per head.
      const double inv_l = 1.0 / static_cast<double>(L);
      for (std::int64_t r = 0; r < L; ++r)
        for (std::int64_t l = 0; l < L; ++l) {
          const double a = A.at(r, l) * inv_l;
          for (std::int64_t i = 0; i < dims.d_k; ++i) out[i] += a * V.at(l, i);
        }
      if (m.cfg.literal_eq9)
        for (std::int64_t i = 0; i < dims.d_k; ++i) out[i] *= scale;
      attn_self.push_back(std::move(A));
    }
  }

  std::vector<double> x_o(static_cast<std::size_t>(dims.out_in()));
  {
    double* dst = x_o.data();
    std::copy(mha.begin(), mha.end(), dst);
    dst += dims.attn_out();
    const double* prow = detail::emb_row(m.params.user_emb, f.user);
    std::copy(prow, prow + dims.d, dst);
    dst += dims.d;
    std::copy(x_q.begin(), x_q.end(), dst);
  }

  std::vector<double> h1_pre(static_cast<std::size_t>(dims.out_hidden1));
  lin::linear_forward(m.params.o_w0, m.params.o_b0, x_o.data(), h1_pre.data());
  std::vector<double> h1(h1_pre);
  lin::relu_forward(h1_pre.data(), h1.data(), dims.out_hidden1);
  std::vector<double> h2_pre(static_cast<std::size_t>(dims.out_hidden2));
  lin::linear_forward(m.params.o_w1, m.params.o_b1, h1.data(), h2_pre.data());
  std::vector<double> h2(h2_pre);
  lin::relu_forward(h2_pre.data(), h2.data(), dims.out_hidden2);
  double logit = m.params.o_b2.a[0];
  for (std::int64_t i = 0; i < dims.out_hidden2; ++i) logit += h2[static_cast<std::size_t>(i)] * m.params.o_w2.at(i, 0);

  if (trace) {
    trace->feats = f;
    trace->x_q = std::move(x_q);
    trace->h_q_pre = std::move(h_pre);
    trace->h_q = std::move(h);
    trace->q_all = std::move(q_all);
    trace->attn = std::move(attn_weights);
    trace->attn_self = std::move(attn_self);
    trace->mha = std::move(mha);
    trace->x_o = std::move(x_o);
    trace->h1_pre = std::move(h1_pre);
    trace->h1 = std::move(h1);
    trace->h2_pre = std::move(h2_pre);
    trace->h2 = std::move(h2);
    trace->logit = logit;
  }
  return logit;
}

// Spec-level scoring entry point: one candidate of a sample.
inline double forward(const Model& m, const FeatureSource& fs, const TrainingSample& sample,
                      Id candidate) {
  static const std::vector<Provenance> kNoProvenance;
  auto it = sample.trigger_of.find(candidate);
  const auto& prov = it == sample.trigger_of.end() ? kNoProvenance : it->second;
  CandidateFeatures f =
      assemble_features(m, fs, sample.user_id, sample.history, candidate, prov);
  SeqCache sc = build_seq_cache(m, sample.history);
  return forward_candidate(m, sc, f, nullptr);
}

// Candidates of a sample in canonical order: positive first, then hard, then
// easy negatives.
inline std::vector<Id> sample_candidates(const TrainingSample& s) {
  std::vector<Id> c;
  c.reserve(1 + s.hard_negatives.size() + s.easy_negatives.size());
  c.push_back(s.positive_item);
  c.insert(c.end(), s.hard_negatives.begin(), s.hard_negatives.end());
  c.insert(c.end(), s.easy_negatives.begin(), s.easy_negatives.end());
  return c;
}

inline std::vector<double> sample_logits(const Model& m, const FeatureSource& fs,
                                         const TrainingSample& sample,
                                         SeqCache* cache_out = nullptr,
                                         std::vector<CandidateTrace>* traces = nullptr) {
  SeqCache sc = build_seq_cache(m, sample.history);
  const std::vector<Id> candidates = sample_candidates(sample);
  std::vector<double> logits;
  logits.reserve(candidates.size());
  for (Id c : candidates) {
    auto it = sample.trigger_of.find(c);
    static const std::vector<Provenance> kNone;
    const auto& prov = it == sample.trigger_of.end() ? kNone : it->second;
    CandidateFeatures f = assemble_features(m, fs, sample.user_id, sample.history, c, prov);
    if (traces) {
      traces->emplace_back();
      logits.push_back(forward_candidate(m, sc, f, &traces->back()));
    } else {
      logits.push_back(forward_candidate(m, sc, f, nullptr));
    }
  }
  if (cache_out) *cache_out = std::move(sc);
  return logits;
}

// Sampled-softmax negative log likelihood of the positive against the
// sample's negatives, computed with a max shift.
inline double loss_from_logits(const std::vector<double>& logits) {
  double zmax = logits[0];
  for (double v : logits) zmax = std::max(zmax, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - zmax);
  return -(logits[0] - zmax - std::log(sum));
}

inline void dloss_dlogits(const std::vector<double>& logits, std::vector<double>& dlogits) {
  std::vector<double> y(logits);
  lin::softmax_inplace(y);
  dlogits.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) dlogits[i] = y[i] - (i == 0 ? 1.0 : 0.0);
}

inline double loss(const Model& m, const FeatureSource& fs, const TrainingSample& sample) {
  if (sample.hard_negatives.empty() && sample.easy_negatives.empty())
    throw std::invalid_argument("loss: sample has no negatives");
  return loss_from_logits(sample_logits(m, fs, sample));
}

// ---------------------------------------------------------------------------
// Backward.

inline void backward_sample(const Model& m, const SeqCache& sc,
                            const std::vector<CandidateTrace>& traces,
                            const std::vector<double>& dlogits, ModelParams& g) {
  const ModelDims& dims = m.dims;
  const std::int64_t L = static_cast<std::int64_t>(sc.seq.size());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dims.d_k));
  const bool self_mode = m.cfg.attention_mode == AttentionMode::self;

  Tensor d_eseq(L, dims.d);
  std::vector<Tensor> dK, dV, dQs;
  for (std::int64_t h = 0; h < dims.heads; ++h) {
    dK.emplace_back(L, dims.d_k);
    dV.emplace_back(L, dims.d_k);
    if (self_mode) dQs.emplace_back(L, dims.d_k);
  }

  std::vector<double> buf;
  for (std::size_t ci = 0; ci < traces.size(); ++ci) {
    const CandidateTrace& tr = traces[ci];
    const double dlogit = dlogits[ci];
    if (dlogit == 0.0) continue;

    // Output MLP.
    std::vector<double> dh2(static_cast<std::size_t>(dims.out_hidden2));
    for (std::int64_t i = 0; i < dims.out_hidden2; ++i) {
      dh2[static_cast<std::size_t>(i)] = dlogit * m.params.o_w2.at(i, 0);
      g.o_w2.at(i, 0) += dlogit * tr.h2[static_cast<std::size_t>(i)];
    }
    g.o_b2.a[0] += dlogit;
    lin::relu_backward(tr.h2_pre.data(), dh2.data(), dims.out_hidden2);
    std::vector<double> dh1(static_cast<std::size_t>(dims.out_hidden1));
    lin::linear_backward(m.params.o_w1, tr.h1.data(), dh2.data(), g.o_w1, g.o_b1, dh1.data());
    lin::relu_backward(tr.h1_pre.data(), dh1.data(), dims.out_hidden1);
    std::vector<double> dx_o(static_cast<std::size_t>(dims.out_in()));
    lin::linear_backward(m.params.o_w0, tr.x_o.data(), dh1.data(), g.o_w0, g.o_b0, dx_o.data());

    const double* dmha = dx_o.data();
    const double* dprof = dx_o.data() + dims.attn_out();
    // dx_q accumulates the Eq. 11 concatenation slice now and the query-MLP
    // path below.
    std::vector<double> dx_q(dx_o.begin() + dims.attn_out() + dims.d, dx_o.end());

    // Attention backward.
    std::vector<double> dq_all(static_cast<std::size_t>(dims.attn_out()), 0.0);
    for (std::int64_t head = 0; head < dims.heads; ++head) {
      const Tensor& K = sc.K[static_cast<std::size_t>(head)];
      const Tensor& V = sc.V[static_cast<std::size_t>(head)];
      const double* dout = dmha + head * dims.d_k;
      const double out_scale = m.cfg.literal_eq9 ? scale : 1.0;
      if (!self_mode) {
        const std::vector<double>& a = tr.attn[static_cast<std::size_t>(head)];
        const double* q = tr.q_all.data() + head * dims.d_k;
        std::vector<double> da(static_cast<std::size_t>(L));
        for (std::int64_t l = 0; l < L; ++l) {
          double acc = 0.0;
          for (std::int64_t i = 0; i < dims.d_k; ++i) {
            acc += dout[i] * out_scale * V.at(l, i);
            dV[static_cast<std::size_t>(head)].at(l, i) +=
                a[static_cast<std::size_t>(l)] * dout[i] * out_scale;
          }
          da[static_cast<std::size_t>(l)] = acc;
        }
        lin::softmax_backward(a, da, buf);
        const double z_scale = m.cfg.literal_eq9 ? 1.0 : scale;
        double* dq = dq_all.data() + head * dims.d_k;
        for (std::int64_t l = 0; l < L; ++l) {
          const double dz = buf[static_cast<std::size_t>(l)] * z_scale;
          for (std::int64_t i = 0; i < dims.d_k; ++i) {
            dq[i] += dz * K.at(l, i);
            dK[static_cast<std::size_t>(head)].at(l, i) += dz * q[i];
          }
        }
      } else {
        const Tensor& A = tr.attn_self[static_cast<std::size_t>(head)];
        const Tensor& Qs = sc.Qs[static_cast<std::size_t>(head)];
        const double inv_l = 1.0 / static_cast<double>(L);
        const double z_scale = m.cfg.literal_eq9 ? 1.0 : scale;
        for (std::int64_t r = 0; r < L; ++r) {
          std::vector<double> da(static_cast<std::size_t>(L));
          for (std::int64_t l = 0; l < L; ++l) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < dims.d_k; ++i) {
              acc += dout[i] * out_scale * inv_l * V.at(l, i);
              // dV from this (r, l) element
            }
            da[static_cast<std::size_t>(l)] = acc;
            const double coeff = A.at(r, l) * inv_l * out_scale;
            for (std::int64_t i = 0; i < dims.d_k; ++i)
              dV[static_cast<std::size_t>(head)].at(l, i) += coeff * dout[i];
          }
          std::vector<double> arow(A.row(r), A.row(r) + L);
          lin::softmax_backward(arow, da, buf);
          for (std::int64_t l = 0; l < L; ++l) {
            const double dz = buf[static_cast<std::size_t>(l)] * z_scale;
            for (std::int64_t i = 0; i < dims.d_k; ++i) {
              dQs[static_cast<std::size_t>(head)].at(r, i) += dz * K.at(l, i);
              dK[static_cast<std::size_t>(head)].at(l, i) += dz * Qs.at(r, i);
            }
          }
        }
      }
    }

    // Query MLP backward into dx_q.
    {
      std::vector<double> dh(static_cast<std::size_t>(dims.q_hidden));
      lin::linear_backward(m.params.q_w1, tr.h_q.data(), dq_all.data(), g.q_w1, g.q_b1, dh.data());
      lin::relu_backward(tr.h_q_pre.data(), dh.data(), dims.q_hidden);
      std::vector<double> dx(static_cast<std::size_t>(dims.query_in()));
      lin::linear_backward(m.params.q_w0, tr.x_q.data(), dh.data(), g.q_w0, g.q_b0, dx.data());
      for (std::size_t i = 0; i < dx_q.size(); ++i) dx_q[i] += dx[i];
    }

    // Scatter feature gradients into the embedding tables.
    const CandidateFeatures& f = tr.feats;
    const double* dtrig = dx_q.data();
    const double* dtarg = dx_q.data() + dims.trigger_width();
    const double* dcross = dx_q.data() + dims.trigger_width() + dims.target_width();

    if (!f.trigger_items.empty()) {
      const double inv = 1.0 / static_cast<double>(f.trigger_items.size());
      for (std::size_t k = 0; k < f.trigger_items.size(); ++k) {
        double* row = g.item_emb.row(detail::emb_row_index(m.params.item_emb, f.trigger_items[k]));
        for (std::int64_t i = 0; i < dims.d; ++i) row[i] += dtrig[i] * inv;
        for (std::int64_t field = 0; field < dims.n_side(); ++field) {
          double* srow = g.side_emb[static_cast<std::size_t>(field)].row(detail::emb_row_index(
              m.params.side_emb[static_cast<std::size_t>(field)],
              f.trigger_side[static_cast<std::size_t>(field)][k]));
          const double* src = dtrig + dims.d * (1 + field);
          for (std::int64_t i = 0; i < dims.d; ++i) srow[i] += src[i] * inv;
        }
      }
    }
    {
      double* row = g.item_emb.row(detail::emb_row_index(m.params.item_emb, f.target));
      for (std::int64_t i = 0; i < dims.d; ++i) row[i] += dtarg[i];
      for (std::int64_t field = 0; field < dims.n_side(); ++field) {
        double* srow = g.side_emb[static_cast<std::size_t>(field)].row(detail::emb_row_index(
            m.params.side_emb[static_cast<std::size_t>(field)],
            f.target_side[static_cast<std::size_t>(field)]));
        const double* src = dtarg + dims.d * (1 + field);
        for (std::int64_t i = 0; i < dims.d; ++i) srow[i] += src[i];
      }
    }
    for (std::size_t slot = 0; slot < kNumCrossSlots; ++slot) {
      double* row = g.cross_emb[slot].row(f.cross[slot]);
      const double* src = dcross + static_cast<std::int64_t>(slot) * dims.d;
      for (std::int64_t i = 0; i < dims.d; ++i) row[i] += src[i];
    }
    {
      double* row = g.user_emb.row(detail::emb_row_index(m.params.user_emb, f.user));
      for (std::int64_t i = 0; i < dims.d; ++i) row[i] += dprof[i];
    }
  }

  // Sequence projections, shared across candidates.
  for (std::int64_t head = 0; head < dims.heads; ++head) {
    for (std::int64_t l = 0; l < L; ++l) {
      const double* e = sc.e_seq.row(l);
      for (std::int64_t i = 0; i < dims.d; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < dims.d_k; ++j) {
          acc += m.params.attn_wk[static_cast<std::size_t>(head)].at(i, j) *
                 dK[static_cast<std::size_t>(head)].at(l, j);
          acc += m.params.attn_wv[static_cast<std::size_t>(head)].at(i, j) *
                 dV[static_cast<std::size_t>(head)].at(l, j);
          g.attn_wk[static_cast<std::size_t>(head)].at(i, j) +=
              e[i] * dK[static_cast<std::size_t>(head)].at(l, j);
          g.attn_wv[static_cast<std::size_t>(head)].at(i, j) +=
              e[i] * dV[static_cast<std::size_t>(head)].at(l, j);
          if (self_mode) {
            acc += m.params.attn_wq_self[static_cast<std::size_t>(head)].at(i, j) *
                   dQs[static_cast<std::size_t>(head)].at(l, j);
            g.attn_wq_self[static_cast<std::size_t>(head)].at(i, j) +=
                e[i] * dQs[static_cast<std::size_t>(head)].at(l, j);
          }
        }
        d_eseq.at(l, i) += acc;
      }
    }
  }
  for (std::int64_t l = 0; l < L; ++l) {
    double* row = g.item_emb.row(detail::emb_row_index(m.params.item_emb, sc.seq[static_cast<std::size_t>(l)]));
    const double* src = d_eseq.row(l);
    for (std::int64_t i = 0; i < dims.d; ++i) row[i] += src[i];
  }
}

// Gradient of one sample's loss, accumulated into `g` with weight `w`.
inline double accumulate_sample_grad(const Model& m, const FeatureSource& fs,
                                     const TrainingSample& sample, double w, ModelParams& g) {
  SeqCache sc;
  std::vector<CandidateTrace> traces;
  std::vector<double> logits = sample_logits(m, fs, sample, &sc, &traces);
  const double sample_loss = loss_from_logits(logits);
  std::vector<double> dlogits;
  dloss_dlogits(logits, dlogits);
  for (double& d : dlogits) d *= w;
  backward_sample(m, sc, traces, dlogits, g);
  return sample_loss;
}

// Mean-loss gradient over a batch. Returns the mean loss.
inline double grad(const Model& m, const FeatureSource& fs,
                   const std::vector<TrainingSample>& batch, ModelParams& g) {
  if (batch.empty()) throw std::invalid_argument("grad: empty batch");
  g = make_params(m.dims);
  const double w = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& s : batch) total += accumulate_sample_grad(m, fs, s, w, g);
  return total * w;
}

}  // namespace pi2i
