#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "pi2i/common.hpp"
#include "pi2i/model.hpp"

namespace pi2i {

struct AdamState {
  std::vector<Tensor> m, v;
  std::int64_t step = 0;

  explicit AdamState(const ModelParams& params) {
    params.for_each_tensor([&](const std::string&, const Tensor& t) {
      m.emplace_back(t.rows, t.cols);
      v.emplace_back(t.rows, t.cols);
    });
  }
};

inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state,
                      double lr, double beta1, double beta2, double eps) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  std::size_t ti = 0;
  std::vector<const Tensor*> gs;
  grads.for_each_tensor([&](const std::string&, const Tensor& g) { gs.push_back(&g); });
  params.for_each_tensor([&](const std::string&, Tensor& p) {
    const Tensor& g = *gs[ti];
    Tensor& m = state.m[ti];
    Tensor& v = state.v[ti];
    for (std::size_t i = 0; i < p.a.size(); ++i) {
      m.a[i] = beta1 * m.a[i] + (1.0 - beta1) * g.a[i];
      v.a[i] = beta2 * v.a[i] + (1.0 - beta2) * g.a[i] * g.a[i];
      const double mhat = m.a[i] / bc1;
      const double vhat = v.a[i] / bc2;
      p.a[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    ++ti;
  });
}

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double wall_seconds = 0.0;
};

// Shuffled mini-batch Adam over the samples. Single-threaded execution is the
// bit-deterministic contract; with threads > 1 the batch gradient is summed
// over per-chunk accumulators in chunk order, which is deterministic for a
// fixed thread count but may differ in the last bits between thread counts.
inline std::vector<EpochLog> train(Model& model, const FeatureSource& fs,
                                   const std::vector<TrainingSample>& samples, int threads = 1) {
  if (samples.empty()) throw std::invalid_argument("train: no samples");
  const TrainConfig& cfg = model.cfg;
  AdamState adam(model.params);
  std::vector<EpochLog> log;

  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng(derive_seed(cfg.seed, "train_shuffle", epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const std::size_t n = end - begin;
      const double w = 1.0 / static_cast<double>(n);

      ModelParams grads = make_params(model.dims);
      double batch_loss = 0.0;
      const int nthreads = resolve_threads(threads);
      if (nthreads <= 1) {
        for (std::size_t k = begin; k < end; ++k)
          batch_loss += accumulate_sample_grad(model, fs, samples[order[k]], w, grads);
      } else {
        std::vector<ModelParams> chunk_grads;
        std::vector<double> chunk_loss;
        const std::size_t nchunks = std::min<std::size_t>(static_cast<std::size_t>(nthreads), n);
        for (std::size_t c = 0; c < nchunks; ++c) {
          chunk_grads.push_back(make_params(model.dims));
          chunk_loss.push_back(0.0);
        }
        parallel_chunks(n, static_cast<int>(nchunks), [&](std::size_t cb, std::size_t ce) {
          // Chunk boundaries are a pure function of (n, nchunks); map begin
          // offset back to a chunk id.
          std::size_t chunk_id = 0;
          {
            const std::size_t base = n / nchunks, rem = n % nchunks;
            std::size_t pos = 0;
            for (std::size_t c = 0; c < nchunks; ++c) {
              if (pos == cb) {
                chunk_id = c;
                break;
              }
              pos += base + (c < rem ? 1 : 0);
            }
          }
          for (std::size_t k = cb; k < ce; ++k)
            chunk_loss[chunk_id] +=
                accumulate_sample_grad(model, fs, samples[order[begin + k]], w, chunk_grads[chunk_id]);
        });
        for (std::size_t c = 0; c < chunk_grads.size(); ++c) {
          batch_loss += chunk_loss[c];
          std::size_t ti = 0;
          std::vector<Tensor*> dst;
          grads.for_each_tensor([&](const std::string&, Tensor& t) { dst.push_back(&t); });
          chunk_grads[c].for_each_tensor([&](const std::string&, const Tensor& t) {
            for (std::size_t i = 0; i < t.a.size(); ++i) dst[ti]->a[i] += t.a[i];
            ++ti;
          });
        }
      }
      batch_loss *= w;
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("train: non-finite loss in epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(batch_index));
      loss_sum += batch_loss * static_cast<double>(n);
      adam_step(model.params, grads, adam, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps);
    }

    EpochLog row;
    row.epoch = epoch;
    row.mean_loss = loss_sum / static_cast<double>(order.size());
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(row);
  }
  return log;
}

inline void save_train_log(const std::vector<EpochLog>& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write training log: " + path);
  for (const auto& row : log)
    out << row.epoch << '\t' << format_double(row.mean_loss) << '\t'
        << format_double(row.wall_seconds) << '\n';
}

}  // namespace pi2i
