#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "pi2i/common.hpp"

namespace pi2i {

// Dense row-major matrix of doubles. Vectors are 1 x n.
struct Tensor {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> a;

  Tensor() = default;
  Tensor(std::int64_t r, std::int64_t c) : rows(r), cols(c), a(static_cast<std::size_t>(r * c), 0.0) {}

  double* row(std::int64_t r) { return a.data() + r * cols; }
  const double* row(std::int64_t r) const { return a.data() + r * cols; }
  double& at(std::int64_t r, std::int64_t c) { return a[static_cast<std::size_t>(r * cols + c)]; }
  double at(std::int64_t r, std::int64_t c) const { return a[static_cast<std::size_t>(r * cols + c)]; }
  std::size_t size() const { return a.size(); }
  void zero() { std::fill(a.begin(), a.end(), 0.0); }

  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const Tensor&) const = default;
};

namespace lin {

// y[j] = sum_i x[i] * W(i, j) + b[j]  with W of shape (in, out)
inline void linear_forward(const Tensor& W, const Tensor& b, const double* x, double* y) {
  for (std::int64_t j = 0; j < W.cols; ++j) y[j] = b.a[static_cast<std::size_t>(j)];
  for (std::int64_t i = 0; i < W.rows; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* wrow = W.row(i);
    for (std::int64_t j = 0; j < W.cols; ++j) y[j] += xi * wrow[j];
  }
}

// y[j] = sum_i x[i] * W(i, j), no bias
inline void matvec(const Tensor& W, const double* x, double* y) {
  for (std::int64_t j = 0; j < W.cols; ++j) y[j] = 0.0;
  for (std::int64_t i = 0; i < W.rows; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* wrow = W.row(i);
    for (std::int64_t j = 0; j < W.cols; ++j) y[j] += xi * wrow[j];
  }
}

// Accumulates dW, db and writes dx (overwritten).
inline void linear_backward(const Tensor& W, const double* x, const double* dy, Tensor& dW,
                            Tensor& db, double* dx) {
  for (std::int64_t i = 0; i < W.rows; ++i) {
    const double* wrow = W.row(i);
    double* dwrow = dW.row(i);
    const double xi = x[i];
    double acc = 0.0;
    for (std::int64_t j = 0; j < W.cols; ++j) {
      acc += wrow[j] * dy[j];
      dwrow[j] += xi * dy[j];
    }
    dx[i] = acc;
  }
  for (std::int64_t j = 0; j < W.cols; ++j) db.a[static_cast<std::size_t>(j)] += dy[j];
}

inline void relu_forward(const double* pre, double* post, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) post[i] = pre[i] > 0.0 ? pre[i] : 0.0;
}

inline void relu_backward(const double* pre, double* d, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i)
    if (pre[i] <= 0.0) d[i] = 0.0;
}

inline double dot(const double* a, const double* b, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Numerically stable in-place softmax; returns log(sum(exp(z - max))) + max.
inline double softmax_inplace(std::vector<double>& z) {
  double zmax = z[0];
  for (double v : z) zmax = std::max(zmax, v);
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - zmax);
    sum += v;
  }
  for (double& v : z) v /= sum;
  return std::log(sum) + zmax;
}

// dz for z -> a = softmax(z) given upstream da: dz = a ⊙ (da - <a, da>).
inline void softmax_backward(const std::vector<double>& a, const std::vector<double>& da,
                             std::vector<double>& dz) {
  double inner = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) inner += a[i] * da[i];
  dz.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) dz[i] = a[i] * (da[i] - inner);
}

}  // namespace lin
}  // namespace pi2i
