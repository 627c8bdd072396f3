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

#include "fedinfer/numerics.hpp"

#include <Eigen/Dense>
#include <limits>
#include <numeric>
#include <string>

namespace fedinfer {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorCode::kShapeError, "Matrix: data length " + std::to_string(data_.size()) +
                                            " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<float>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto &r : rows) {
    if (r.size() != cols_) throw Error(ErrorCode::kShapeError, "Matrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float x) { return std::isfinite(x); });
}

Matrix Matrix::gather_rows(std::span<const std::size_t> indices) const {
  Matrix out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows_) throw Error(ErrorCode::kShapeError, "gather_rows: index out of range");
    std::copy_n(data_.data() + indices[i] * cols_, cols_, out.data() + i * cols_);
  }
  return out;
}

void require_same_shape(const Matrix &a, const Matrix &b, const char *context) {
  if (!a.same_shape(b)) {
    throw Error(ErrorCode::kShapeError, std::string(context) + ": " + std::to_string(a.rows()) + "x" +
                                            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                            "x" + std::to_string(b.cols()));
  }
}

namespace {

void require_inner(std::size_t lhs, std::size_t rhs, const char *context) {
  if (lhs != rhs) {
    throw Error(ErrorCode::kShapeError,
                std::string(context) + ": inner dimensions " + std::to_string(lhs) + " vs " + std::to_string(rhs));
  }
}

using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const FloatMatrix>;
using MutableMap = Eigen::Map<FloatMatrix>;

ConstMap view(const Matrix &m) {
  return ConstMap(m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

MutableMap view(Matrix &m) {
  return MutableMap(m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

}  // namespace

Matrix matmul(const Matrix &a, const Matrix &b) {
  require_inner(a.cols(), b.rows(), "matmul");
  Matrix out(a.rows(), b.cols());
  if (!out.empty() && a.cols() > 0) view(out).noalias() = view(a) * view(b);
  return out;
}

Matrix matmul_tn(const Matrix &a, const Matrix &b) {
  require_inner(a.rows(), b.rows(), "matmul_tn");
  Matrix out(a.cols(), b.cols());
  if (!out.empty() && a.rows() > 0) view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

Matrix matmul_nt(const Matrix &a, const Matrix &b) {
  require_inner(a.cols(), b.cols(), "matmul_nt");
  Matrix out(a.rows(), b.rows());
  if (!out.empty() && a.cols() > 0) view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

Matrix transpose(const Matrix &a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  }
  return t;
}

double dot(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) throw Error(ErrorCode::kShapeError, "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += static_cast<double>(u[i]) * static_cast<double>(v[i]);
  return s;
}

double l2_norm(std::span<const float> u) { return std::sqrt(dot(u, u)); }

double l2_distance(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) throw Error(ErrorCode::kShapeError, "l2_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double d = static_cast<double>(u[i]) - static_cast<double>(v[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

double frobenius_norm(const Matrix &a) { return l2_norm(a.values()); }

SpectralNorm spectral_norm(const Matrix &w, int max_iters, double tol) {
  if (w.empty()) throw Error(ErrorCode::kInvalidInput, "spectral_norm: empty matrix");
  require_finite(w.values(), "spectral_norm");
  const std::size_t m = w.rows(), n = w.cols();
  std::vector<double> wd(w.values().begin(), w.values().end());

  // Fixed-seed start vector keeps the estimate reproducible.
  Rng rng(0x5eed5eedULL);
  std::vector<double> v(n), u(m), next(n);
  for (double &x : v) x = rng.normal();

  auto normalize = [](std::vector<double> &x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    s = std::sqrt(s);
    if (s > 0.0) {
      for (double &e : x) e /= s;
    }
    return s;
  };
  normalize(v);

  SpectralNorm result;
  double prev = 0.0;
  for (int it = 1; it <= max_iters; ++it) {
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += wd[i * n + j] * v[j];
      u[i] = s;
    }
    double sigma = 0.0;
    for (double e : u) sigma += e * e;
    sigma = std::sqrt(sigma);
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) next[j] += wd[i * n + j] * u[i];
    }
    result.value = sigma;
    result.iterations = it;
    if (normalize(next) == 0.0) {
      result.converged = true;
      return result;
    }
    v.swap(next);
    if (it > 1 && std::abs(sigma - prev) <= tol * sigma) {
      result.converged = true;
      return result;
    }
    prev = sigma;
  }
  return result;
}

GradCheckResult grad_check(const std::function<double(const Matrix &)> &f, const Matrix &params,
                           const Matrix &analytic_grad, double h) {
  require_same_shape(params, analytic_grad, "grad_check");
  GradCheckResult result;
  Matrix probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const float x = params.data()[i];
    const float plus = static_cast<float>(static_cast<double>(x) + h);
    const float minus = static_cast<float>(static_cast<double>(x) - h);
    probe.data()[i] = plus;
    const double f_plus = f(probe);
    probe.data()[i] = minus;
    const double f_minus = f(probe);
    probe.data()[i] = x;
    const double numeric = (f_plus - f_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
    const double analytic = analytic_grad.data()[i];
    const double err =
        std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw Error(ErrorCode::kInvalidInput, "Rng::below: n must be > 0");
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t r = engine_();
    if (r >= threshold) return r % n;
  }
}

double Rng::normal() {
  if (has_spare_normal_) {
    has_spare_normal_ = false;
    return spare_normal_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double scale = std::sqrt(-2.0 * std::log(s) / s);
  spare_normal_ = v * scale;
  has_spare_normal_ = true;
  return u * scale;
}

double Rng::gamma(double shape) {
  if (!(shape > 0.0)) throw Error(ErrorCode::kInvalidInput, "Rng::gamma: shape must be > 0");
  if (shape < 1.0) {
    double u;
    do {
      u = uniform();
    } while (u == 0.0);
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

std::vector<double> Rng::dirichlet(std::span<const double> alpha) {
  std::vector<double> out(alpha.size());
  for (;;) {
    double sum = 0.0;
    for (std::size_t i = 0; i < alpha.size(); ++i) {
      out[i] = gamma(alpha[i]);
      sum += out[i];
    }
    // All-underflow draws are possible for tiny alpha; redraw.
    if (sum > 0.0) {
      for (double &x : out) x /= sum;
      return out;
    }
  }
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) {
  auto splitmix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return splitmix(base ^ splitmix(stream));
}

double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double mu = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace fedinfer
