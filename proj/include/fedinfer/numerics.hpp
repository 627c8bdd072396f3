/**
 * Copyright 2026 The fedinfer Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef FEDINFER_NUMERICS_HPP_
#define FEDINFER_NUMERICS_HPP_

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

#include "fedinfer/error.hpp"

namespace fedinfer {

/**
 * Dense row-major matrix of 32-bit floats.
 *
 * Batches of features, embeddings and logits are all stored one sample per
 * row. Reductions over entries are accumulated in double precision by the
 * free functions below.
 */
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);
  Matrix(std::initializer_list<std::initializer_list<float>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float &operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  float *data() noexcept { return data_.data(); }
  const float *data() const noexcept { return data_.data(); }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Matrix &o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool all_finite() const noexcept;

  // Copies the listed rows, in order, into a new matrix.
  Matrix gather_rows(std::span<const std::size_t> indices) const;

  bool operator==(const Matrix &o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

void require_same_shape(const Matrix &a, const Matrix &b, const char *context);

// C = A * B.
Matrix matmul(const Matrix &a, const Matrix &b);
// C = A^T * B.
Matrix matmul_tn(const Matrix &a, const Matrix &b);
// C = A * B^T.
Matrix matmul_nt(const Matrix &a, const Matrix &b);
Matrix transpose(const Matrix &a);

double dot(std::span<const float> u, std::span<const float> v);
double l2_norm(std::span<const float> u);
double l2_distance(std::span<const float> u, std::span<const float> v);
double frobenius_norm(const Matrix &a);

template <std::floating_point T>
void require_finite(std::span<const T> v, const char *context) {
  for (T x : v) {
    if (!std::isfinite(x)) throw Error(ErrorCode::kInvalidInput, std::string(context) + ": non-finite value");
  }
}

/**
 * Softmax of m / temperature with max-subtraction. The result is always in
 * double precision regardless of the logits' storage type.
 */
template <std::floating_point T>
std::vector<double> softmax(std::span<const T> logits, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw Error(ErrorCode::kInvalidInput, "softmax: temperature must be > 0");
  if (logits.empty()) throw Error(ErrorCode::kInvalidInput, "softmax: empty logits");
  require_finite(logits, "softmax");
  double mx = static_cast<double>(logits[0]);
  for (T x : logits) mx = std::max(mx, static_cast<double>(x));
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
    sum += out[i];
  }
  for (double &p : out) p /= sum;
  return out;
}

template <std::floating_point T>
std::vector<double> softmax(const std::vector<T> &logits, double temperature = 1.0) {
  return softmax(std::span<const T>(logits), temperature);
}

template <std::floating_point T>
double log_sum_exp(std::span<const T> logits) {
  if (logits.empty()) throw Error(ErrorCode::kInvalidInput, "log_sum_exp: empty vector");
  require_finite(logits, "log_sum_exp");
  double mx = static_cast<double>(logits[0]);
  for (T x : logits) mx = std::max(mx, static_cast<double>(x));
  double sum = 0.0;
  for (T x : logits) sum += std::exp(static_cast<double>(x) - mx);
  return mx + std::log(sum);
}

template <std::floating_point T>
double log_sum_exp(const std::vector<T> &logits) {
  return log_sum_exp(std::span<const T>(logits));
}

// Cosine similarity clamped to [-1, 1]; a zero-norm argument is an error.
template <std::floating_point T>
double cosine_similarity(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size()) throw Error(ErrorCode::kShapeError, "cosine_similarity: length mismatch");
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += static_cast<double>(u[i]) * static_cast<double>(v[i]);
    uu += static_cast<double>(u[i]) * static_cast<double>(u[i]);
    vv += static_cast<double>(v[i]) * static_cast<double>(v[i]);
  }
  if (uu == 0.0 || vv == 0.0) throw Error(ErrorCode::kDegenerateVector, "cosine_similarity: zero-norm vector");
  return std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

template <std::floating_point T>
double cosine_similarity(const std::vector<T> &u, const std::vector<T> &v) {
  return cosine_similarity(std::span<const T>(u), std::span<const T>(v));
}

template <std::floating_point T>
std::size_t argmax(std::span<const T> v) {
  // First maximum wins, so ties resolve to the lowest index.
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

template <std::floating_point T>
std::size_t argmax(const std::vector<T> &v) {
  return argmax(std::span<const T>(v));
}

template <std::floating_point T>
std::size_t argmax(std::span<T> v) {
  return argmax(std::span<const T>(v));
}

struct SpectralNorm {
  double value = 0.0;
  bool converged = false;
  int iterations = 0;
};

// Largest singular value by power iteration on W^T W.
SpectralNorm spectral_norm(const Matrix &w, int max_iters = 2000, double tol = 1e-12);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

/**
 * Compares an analytic gradient against central differences of `f`.
 *
 * The per-coordinate step is the float-representable difference between the
 * perturbed parameters, so storage rounding does not leak into the estimate.
 * Relative error is |g_a - g_n| / max(1, |g_a|, |g_n|).
 */
GradCheckResult grad_check(const std::function<double(const Matrix &)> &f, const Matrix &params,
                           const Matrix &analytic_grad, double h = 1e-3);

/**
 * Seeded pseudo-random stream.
 *
 * Bits come from std::mt19937_64, whose output sequence is fixed by the C++
 * standard. The distribution transforms are implemented here rather than via
 * <random> distributions, whose algorithms are implementation-defined, so a
 * seed reproduces the same draws on every conforming toolchain.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n) by rejection, no modulo bias.
  std::uint64_t below(std::uint64_t n);
  // Standard normal via the Marsaglia polar method.
  double normal();
  // Gamma(shape, 1) via Marsaglia-Tsang, boosted for shape < 1.
  double gamma(double shape);
  std::vector<double> dirichlet(std::span<const double> alpha);

  template <typename T>
  void shuffle(std::vector<T> &v) {
    // Fisher-Yates.
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

// SplitMix64 finalizer over the pair; derives independent sub-stream seeds.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream);

// Population mean and sample (n-1) standard deviation.
double mean(std::span<const double> v);
double sample_stddev(std::span<const double> v);

}  // namespace fedinfer

#endif  // FEDINFER_NUMERICS_HPP_
