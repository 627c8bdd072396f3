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

#include "fedinfer/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace fedinfer::ens {

namespace {

constexpr std::pair<Rule, std::string_view> kNames[] = {
    {Rule::kHardVote, "hard_vote"},     {Rule::kSoftVote, "soft_vote"},   {Rule::kLogitsAvg, "logits_avg"},
    {Rule::kMaxSoftmax, "max_softmax"}, {Rule::kMinEntropy, "min_entropy"}, {Rule::kMinEnergy, "min_energy"},
    {Rule::kRandom, "random"},          {Rule::kOracle, "oracle"},
};

std::size_t argmin_device(const std::vector<double> &scores) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < scores.size(); ++k) {
    if (scores[k] < scores[best]) best = k;
  }
  return best;
}

Decision pick(std::span<const std::span<const float>> logits, std::size_t device) {
  return {argmax(logits[device]), device};
}

Decision min_energy(std::span<const std::span<const float>> logits) {
  std::vector<double> e;
  for (auto m : logits) e.push_back(energy(m));
  return pick(logits, argmin_device(e));
}

}  // namespace

std::string_view to_string(Rule rule) {
  for (const auto &[r, name] : kNames) {
    if (r == rule) return name;
  }
  return "unknown";
}

Rule parse_rule(std::string_view name) {
  for (const auto &[r, n] : kNames) {
    if (n == name) return r;
  }
  throw Error(ErrorCode::kInvalidConfig, "unknown ensemble rule '" + std::string(name) + "'");
}

const std::vector<Rule> &all_rules() {
  static const std::vector<Rule> rules = [] {
    std::vector<Rule> out;
    for (const auto &entry : kNames) out.push_back(entry.first);
    return out;
  }();
  return rules;
}

const std::vector<Rule> &practical_rules() {
  static const std::vector<Rule> rules = [] {
    std::vector<Rule> out;
    for (const auto &entry : kNames) {
      if (entry.first != Rule::kOracle) out.push_back(entry.first);
    }
    return out;
  }();
  return rules;
}

double energy(std::span<const float> logits) { return -log_sum_exp(logits); }

double entropy(std::span<const float> logits) {
  double h = 0.0;
  for (double p : softmax(logits)) h -= p * std::log(std::max(p, 1e-12));
  return h;
}

Decision apply(Rule rule, std::span<const std::span<const float>> logits, const RuleContext &ctx) {
  if (logits.empty()) throw Error(ErrorCode::kInvalidInput, "ensemble: no device logits");
  const std::size_t c = logits.front().size();
  if (c == 0) throw Error(ErrorCode::kInvalidInput, "ensemble: empty logits");
  for (auto m : logits) {
    if (m.size() != c) throw Error(ErrorCode::kShapeError, "ensemble: devices disagree on class count");
  }
  if (rule == Rule::kOracle && !ctx.true_label) {
    throw Error(ErrorCode::kMissingOracleLabel, "oracle rule needs the true label");
  }
  const std::size_t k = logits.size();
  switch (rule) {
    case Rule::kHardVote: {
      std::vector<double> votes(c, 0.0);
      for (auto m : logits) votes[argmax(m)] += 1.0;
      return {argmax(votes), std::nullopt};
    }
    case Rule::kSoftVote: {
      std::vector<double> mean_p(c, 0.0);
      for (auto m : logits) {
        const auto p = softmax(m);
        for (std::size_t j = 0; j < c; ++j) mean_p[j] += p[j] / static_cast<double>(k);
      }
      return {argmax(mean_p), std::nullopt};
    }
    case Rule::kLogitsAvg: {
      std::vector<double> mean_m(c, 0.0);
      for (auto m : logits) {
        for (std::size_t j = 0; j < c; ++j) mean_m[j] += static_cast<double>(m[j]) / static_cast<double>(k);
      }
      return {argmax(mean_m), std::nullopt};
    }
    case Rule::kMaxSoftmax: {
      std::vector<double> neg_conf;
      for (auto m : logits) {
        const auto p = softmax(m);
        neg_conf.push_back(-*std::max_element(p.begin(), p.end()));
      }
      return pick(logits, argmin_device(neg_conf));
    }
    case Rule::kMinEntropy: {
      std::vector<double> h;
      for (auto m : logits) h.push_back(entropy(m));
      return pick(logits, argmin_device(h));
    }
    case Rule::kMinEnergy:
      return min_energy(logits);
    case Rule::kRandom: {
      Rng rng(mix_seed(ctx.seed, ctx.sample_index));
      return pick(logits, static_cast<std::size_t>(rng.below(k)));
    }
    case Rule::kOracle:
      for (std::size_t d = 0; d < k; ++d) {
        if (static_cast<int>(argmax(logits[d])) == *ctx.true_label) return pick(logits, d);
      }
      return min_energy(logits);
  }
  throw Error(ErrorCode::kInvalidInput, "ensemble: unknown rule");
}

std::vector<Decision> apply_batch(Rule rule, const std::vector<Matrix> &logits, std::span<const int> true_labels,
                                  std::uint64_t seed) {
  if (logits.empty()) throw Error(ErrorCode::kInvalidInput, "ensemble: no device logits");
  const std::size_t n = logits.front().rows();
  for (const Matrix &m : logits) require_same_shape(m, logits.front(), "ensemble batch");
  if (!true_labels.empty() && true_labels.size() != n) {
    throw Error(ErrorCode::kShapeError, "ensemble batch: label count mismatch");
  }
  std::vector<Decision> out;
  out.reserve(n);
  std::vector<std::span<const float>> rows(logits.size());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t d = 0; d < logits.size(); ++d) rows[d] = logits[d].row(r);
    RuleContext ctx{std::nullopt, seed, r};
    if (!true_labels.empty()) ctx.true_label = true_labels[r];
    out.push_back(apply(rule, rows, ctx));
  }
  return out;
}

double accuracy(const std::vector<Decision> &decisions, std::span<const int> labels) {
  if (decisions.size() != labels.size()) throw Error(ErrorCode::kShapeError, "accuracy: length mismatch");
  if (decisions.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (static_cast<int>(decisions[i].label) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace fedinfer::ens
