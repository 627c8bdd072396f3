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

#include "fedinfer/losses.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <string>

namespace fedinfer::losses {

namespace {

using DMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kProbFloor = 1e-12;

void check_batch(const std::vector<Matrix> &embeddings) {
  if (embeddings.size() < 2) throw Error(ErrorCode::kInvalidBatch, "consensus loss needs K >= 2 devices");
  const Matrix &first = embeddings.front();
  if (first.rows() < 2) throw Error(ErrorCode::kInvalidBatch, "consensus loss needs N >= 2 samples");
  if (first.cols() == 0) throw Error(ErrorCode::kShapeError, "consensus loss: zero-width embeddings");
  for (const Matrix &e : embeddings) {
    require_same_shape(e, first, "consensus loss embeddings");
    require_finite(e.values(), "consensus loss");
  }
}

DMat to_double(const Matrix &m) {
  DMat out(static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
  for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = m.data()[i];
  return out;
}

// Row-normalizes in place and returns the original norms.
Eigen::VectorXd normalize_rows(DMat &m) {
  Eigen::VectorXd norms = m.rowwise().norm();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (norms(r) == 0.0) throw Error(ErrorCode::kDegenerateVector, "zero-norm embedding in contrastive loss");
    m.row(r) /= norms(r);
  }
  return norms;
}

// Gradient through u = v / |v|: (g - (g.u) u) / |v|, row by row.
DMat unit_backward(const DMat &grad_unit, const DMat &unit, const Eigen::VectorXd &norms) {
  DMat out(grad_unit.rows(), grad_unit.cols());
  for (Eigen::Index r = 0; r < unit.rows(); ++r) {
    const double proj = grad_unit.row(r).dot(unit.row(r));
    out.row(r) = (grad_unit.row(r) - proj * unit.row(r)) / norms(r);
  }
  return out;
}

/**
 * Sum over x of both contrastive directions on a similarity matrix S:
 *   l(row x) = -S_xx/tau + log sum_j exp(S_xj/tau)
 *   l(col x) = -S_xx/tau + log sum_j exp(S_jx/tau)
 * with the positive S_xx left out of the sums unless the config includes it.
 * Cosine similarities lie in [-1, 1], so one shared shift of 1/tau keeps every
 * exponent in [-2/tau, 0]. Writes d(sum)/dS when grad is non-null.
 */
double symmetric_terms(const DMat &sim, const ContrastiveConfig &cfg, DMat *grad) {
  const double inv_tau = 1.0 / cfg.tau;
  const Eigen::Index n = sim.rows();
  DMat e = ((sim.array() - 1.0) * inv_tau).exp().matrix();
  if (!cfg.denominator_includes_positive) e.diagonal().setZero();
  const Eigen::VectorXd row_sum = e.rowwise().sum();
  const Eigen::RowVectorXd col_sum = e.colwise().sum();
  double total = 0.0;
  for (Eigen::Index x = 0; x < n; ++x) {
    total += 2.0 * (inv_tau - sim(x, x) * inv_tau) + std::log(row_sum(x)) + std::log(col_sum(x));
  }
  if (grad != nullptr) {
    const Eigen::VectorXd row_w = row_sum.cwiseInverse() * inv_tau;
    const Eigen::RowVectorXd col_w = col_sum.cwiseInverse() * inv_tau;
    *grad = e.array().colwise() * row_w.array();
    grad->array() += e.array().rowwise() * col_w.array();
    grad->diagonal().array() -= 2.0 * inv_tau;
  }
  return total;
}

Matrix to_float(const DMat &m) {
  Matrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = static_cast<float>(m.data()[i]);
  return out;
}

}  // namespace

void ContrastiveConfig::validate() const {
  if (!(tau > 0.0)) throw Error(ErrorCode::kInvalidConfig, "contrastive tau must be > 0");
}

void DistillConfig::validate() const {
  if (!(temperature > 0.0)) throw Error(ErrorCode::kInvalidConfig, "distillation temperature must be > 0");
}

double ntxent_term(std::span<const float> anchor, std::span<const float> positive, const Matrix &negatives,
                   const ContrastiveConfig &cfg) {
  cfg.validate();
  if (negatives.rows() == 0) throw Error(ErrorCode::kInvalidBatch, "ntxent_term: no negatives");
  if (negatives.cols() != anchor.size()) throw Error(ErrorCode::kShapeError, "ntxent_term: dimension mismatch");
  const double pos = cosine_similarity(anchor, positive) / cfg.tau;
  std::vector<double> logits;
  logits.reserve(negatives.rows() + 1);
  for (std::size_t r = 0; r < negatives.rows(); ++r) logits.push_back(cosine_similarity(anchor, negatives.row(r)) / cfg.tau);
  if (cfg.denominator_includes_positive) logits.push_back(pos);
  return -pos + log_sum_exp(logits);
}

ConsensusLoss consensus_loss(const std::vector<Matrix> &embeddings, const ContrastiveConfig &cfg,
                             TermCounter *counter) {
  cfg.validate();
  check_batch(embeddings);
  const std::size_t num_devices = embeddings.size();
  const Eigen::Index n = static_cast<Eigen::Index>(embeddings.front().rows());
  const double k = static_cast<double>(num_devices);

  std::vector<DMat> unit(num_devices);
  std::vector<Eigen::VectorXd> norms(num_devices);
  DMat centroid = DMat::Zero(n, static_cast<Eigen::Index>(embeddings.front().cols()));
  for (std::size_t d = 0; d < num_devices; ++d) {
    unit[d] = to_double(embeddings[d]);
    centroid += unit[d];
  }
  centroid /= k;
  for (std::size_t d = 0; d < num_devices; ++d) norms[d] = normalize_rows(unit[d]);
  DMat centroid_unit = centroid;
  const Eigen::VectorXd centroid_norms = normalize_rows(centroid_unit);

  const double scale = 1.0 / (2.0 * static_cast<double>(n) * k);
  double total = 0.0;
  DMat grad_centroid_unit = DMat::Zero(centroid.rows(), centroid.cols());
  ConsensusLoss out;
  std::vector<DMat> grad_unit(num_devices);
  for (std::size_t d = 0; d < num_devices; ++d) {
    // sim(z'_{d,x}, zavg_{x'}) for every (x, x'); rows anchor the device, columns the centroid.
    const DMat sim = unit[d] * centroid_unit.transpose();
    DMat dsim;
    total += symmetric_terms(sim, cfg, &dsim);
    if (counter) counter->terms += 2 * static_cast<std::uint64_t>(n);
    dsim *= scale;
    grad_unit[d] = dsim * centroid_unit;
    grad_centroid_unit.noalias() += dsim.transpose() * unit[d];
  }
  out.value = total * scale;

  DMat grad_centroid = unit_backward(grad_centroid_unit, centroid_unit, centroid_norms);
  out.grads.reserve(num_devices);
  for (std::size_t d = 0; d < num_devices; ++d) {
    DMat g = unit_backward(grad_unit[d], unit[d], norms[d]);
    if (!cfg.stop_gradient_centroid) g += grad_centroid / k;
    out.grads.push_back(to_float(g));
  }
  return out;
}

double pairwise_consensus_loss(const std::vector<Matrix> &embeddings, const ContrastiveConfig &cfg,
                               TermCounter *counter) {
  cfg.validate();
  check_batch(embeddings);
  const std::size_t num_devices = embeddings.size();
  const std::size_t n = embeddings.front().rows();

  std::vector<DMat> unit(num_devices);
  for (std::size_t d = 0; d < num_devices; ++d) {
    unit[d] = to_double(embeddings[d]);
    normalize_rows(unit[d]);
  }
  double sum_pairs = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < num_devices; ++i) {
    for (std::size_t j = i + 1; j < num_devices; ++j) {
      const DMat sim = unit[i] * unit[j].transpose();
      const double pair_total = symmetric_terms(sim, cfg, nullptr);
      if (counter) counter->terms += 2 * n;
      sum_pairs += pair_total / (2.0 * static_cast<double>(n));
      ++pairs;
    }
  }
  return sum_pairs / static_cast<double>(pairs);
}

namespace {

// log softmax(row / t) in double precision.
void log_softmax_row(std::span<const float> row, double t, std::vector<double> &out) {
  out.resize(row.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < row.size(); ++i) {
    out[i] = static_cast<double>(row[i]) / t;
    mx = std::max(mx, out[i]);
  }
  double sum = 0.0;
  for (double v : out) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (double &v : out) v -= lse;
}

}  // namespace

LossWithGrad distill_loss(const Matrix &student_logits, const Matrix &teacher_logits, const DistillConfig &cfg) {
  cfg.validate();
  require_same_shape(student_logits, teacher_logits, "distill_loss");
  require_finite(student_logits.values(), "distill_loss student");
  require_finite(teacher_logits.values(), "distill_loss teacher");
  const double t = cfg.temperature;
  const std::size_t c = student_logits.cols();
  const double log_floor = std::log(kProbFloor);
  LossWithGrad out{0.0, Matrix(student_logits.rows(), c)};
  std::vector<double> log_p, log_q, f(c);
  double total = 0.0;
  for (std::size_t r = 0; r < student_logits.rows(); ++r) {
    log_softmax_row(student_logits.row(r), t, log_p);
    log_softmax_row(teacher_logits.row(r), t, log_q);
    double kl = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      f[i] = std::max(log_p[i], log_floor) - std::max(log_q[i], log_floor);
      kl += std::exp(log_p[i]) * f[i];
    }
    total += kl;
    // d KL / d s_j = p_j (f_j - KL) / t, then scaled by t^2.
    auto g = out.grad.row(r);
    for (std::size_t j = 0; j < c; ++j) g[j] = static_cast<float>(t * std::exp(log_p[j]) * (f[j] - kl));
  }
  out.value = std::max(0.0, t * t * total);
  return out;
}

LossWithGrad cross_entropy(const Matrix &logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) throw Error(ErrorCode::kShapeError, "cross_entropy: label count mismatch");
  if (logits.rows() == 0) throw Error(ErrorCode::kInvalidBatch, "cross_entropy: empty batch");
  require_finite(logits.values(), "cross_entropy");
  const std::size_t c = logits.cols();
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  LossWithGrad out{0.0, Matrix(logits.rows(), c)};
  std::vector<double> log_p;
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw Error(ErrorCode::kInvalidLabel, "cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                                std::to_string(c) + ")");
    }
    log_softmax_row(logits.row(r), 1.0, log_p);
    total -= log_p[static_cast<std::size_t>(y)];
    auto g = out.grad.row(r);
    for (std::size_t j = 0; j < c; ++j) {
      const double onehot = static_cast<std::size_t>(y) == j ? 1.0 : 0.0;
      g[j] = static_cast<float>((std::exp(log_p[j]) - onehot) * inv_n);
    }
  }
  out.value = total * inv_n;
  return out;
}

}  // namespace fedinfer::losses
