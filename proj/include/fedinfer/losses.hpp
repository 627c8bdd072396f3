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

#ifndef FEDINFER_LOSSES_HPP_
#define FEDINFER_LOSSES_HPP_

#include <cstdint>
#include <span>
#include <vector>

#include "fedinfer/numerics.hpp"

namespace fedinfer::losses {

struct ContrastiveConfig {
  double tau = 0.2;
  // When set, the positive pair also appears in the denominator (SimCLR form).
  bool denominator_includes_positive = false;
  // When set, the per-sample centroid is treated as a constant in the gradient.
  bool stop_gradient_centroid = false;

  void validate() const;
};

struct DistillConfig {
  double temperature = 3.0;

  void validate() const;
};

// Counts evaluations of the single-direction contrastive term l(., .).
struct TermCounter {
  std::uint64_t terms = 0;
};

/**
 * One directional NT-Xent term:
 *   -log( exp(sim(anchor, positive)/tau) / sum_n exp(sim(anchor, n)/tau) )
 * where `negatives` holds one row per other sample of the batch. With
 * denominator_includes_positive the positive is added to that sum.
 */
double ntxent_term(std::span<const float> anchor, std::span<const float> positive, const Matrix &negatives,
                   const ContrastiveConfig &cfg);

struct ConsensusLoss {
  double value = 0.0;
  // One N x d gradient per device, aligned with the input embeddings.
  std::vector<Matrix> grads;
};

/**
 * Centroid contrastive loss over K devices' embeddings of the same N samples.
 *
 * Every device's embedding of sample x is contrasted in both directions
 * against the cross-device mean of x, with the other samples' means (resp.
 * the same device's other embeddings) as negatives. The gradient includes
 * the path through the mean unless stop_gradient_centroid is set.
 */
ConsensusLoss consensus_loss(const std::vector<Matrix> &embeddings, const ContrastiveConfig &cfg,
                             TermCounter *counter = nullptr);

// Mean symmetric NT-Xent over all K(K-1)/2 device pairs. Value only.
double pairwise_consensus_loss(const std::vector<Matrix> &embeddings, const ContrastiveConfig &cfg,
                               TermCounter *counter = nullptr);

struct LossWithGrad {
  double value = 0.0;
  Matrix grad;
};

/**
 * T^2 * sum_rows KL( softmax(student/T) || softmax(teacher/T) ), natural log,
 * probabilities floored at 1e-12 inside the log. The teacher is a constant.
 */
LossWithGrad distill_loss(const Matrix &student_logits, const Matrix &teacher_logits, const DistillConfig &cfg);

// Mean negative log-likelihood; gradient is (softmax - onehot) / N.
LossWithGrad cross_entropy(const Matrix &logits, std::span<const int> labels);

}  // namespace fedinfer::losses

#endif  // FEDINFER_LOSSES_HPP_
