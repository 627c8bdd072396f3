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

#ifndef FEDINFER_ENSEMBLE_HPP_
#define FEDINFER_ENSEMBLE_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fedinfer/numerics.hpp"

namespace fedinfer::ens {

enum class Rule { kHardVote, kSoftVote, kLogitsAvg, kMaxSoftmax, kMinEntropy, kMinEnergy, kRandom, kOracle };

std::string_view to_string(Rule rule);
Rule parse_rule(std::string_view name);
// Every rule, in declaration order.
const std::vector<Rule> &all_rules();
// Rules usable without ground truth.
const std::vector<Rule> &practical_rules();

// -log sum exp(m).
double energy(std::span<const float> logits);
// Natural-log entropy of softmax(m), probabilities floored at 1e-12.
double entropy(std::span<const float> logits);

struct Decision {
  std::size_t label = 0;
  // Set by the selection rules (max_softmax, min_entropy, min_energy, random, oracle).
  std::optional<std::size_t> device;
};

struct RuleContext {
  std::optional<int> true_label;
  // The random rule draws from mix_seed(seed, sample_index).
  std::uint64_t seed = 0;
  std::uint64_t sample_index = 0;
};

/**
 * Combines K per-device logit vectors into one label. Ties go to the lowest
 * class index for argmax and the lowest device index for selection; the
 * oracle falls back to min_energy when no device is right.
 */
Decision apply(Rule rule, std::span<const std::span<const float>> logits, const RuleContext &ctx = {});

// Row-wise apply over per-device logit matrices of equal shape.
std::vector<Decision> apply_batch(Rule rule, const std::vector<Matrix> &logits, std::span<const int> true_labels,
                                  std::uint64_t seed);

double accuracy(const std::vector<Decision> &decisions, std::span<const int> labels);

}  // namespace fedinfer::ens

#endif  // FEDINFER_ENSEMBLE_HPP_
