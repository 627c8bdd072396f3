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

#ifndef FEDINFER_EVALKIT_HPP_
#define FEDINFER_EVALKIT_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedinfer/datakit.hpp"
#include "fedinfer/ensemble.hpp"
#include "fedinfer/federation.hpp"
#include "fedinfer/model_zoo.hpp"

namespace fedinfer::eval {

struct TaskConfig {
  data::SyntheticTaskConfig synth;
  double shared_fraction = 0.2;
  data::PartitionScheme scheme = data::PartitionScheme::kMild;
  double alpha = 0.5;
  std::size_t num_devices = 3;

  void validate() const;
};

struct ExperimentConfig {
  TaskConfig task;
  zoo::ArchConfig arch;
  nn::TrainLoopConfig tail_loop;
  fed::FederationConfig fed;
  std::vector<ens::Rule> rules = ens::all_rules();
  std::uint64_t seed = 0;
  bool edge_ensemble = true;

  void validate() const;
};

/**
 * Everything one experiment cell trains and evaluates: the synthetic task,
 * the shared/local split, the partition, and one DeviceState per device.
 */
struct System {
  // Raw inputs behind synthetic heads; null when devices read precomputed features.
  std::shared_ptr<const data::FeatureTable> raw;
  // Per-device precomputed features; empty for synthetic heads.
  std::vector<std::shared_ptr<const data::FeatureTable>> device_tables;
  data::SyntheticTask task;
  data::HoldoutSplit split;
  data::Partition partition;
  std::vector<zoo::DeviceState> devices;
  // Untrained CO stacks (parameters and dropout streams), so variants restart from the same point.
  std::vector<nn::Sequential> co_init;
};

// The pieces of build_system, each seeded from cfg.seed, so stages can run separately.
data::SyntheticTask generate_task(const ExperimentConfig &cfg);
data::HoldoutSplit split_shared(const ExperimentConfig &cfg, const data::Dataset &train);
data::Partition partition_local(const ExperimentConfig &cfg, const data::Dataset &local_pool);
/**
 * Creates untrained devices over an existing task. With `device_tables` every
 * device reads its own precomputed features; otherwise each gets a synthetic
 * head over task.inputs.
 */
System assemble_system(const ExperimentConfig &cfg, data::SyntheticTask task, data::HoldoutSplit split,
                       data::Partition partition,
                       std::vector<std::shared_ptr<const data::FeatureTable>> device_tables = {});

// generate_task, split_shared, partition_local and assemble_system in one step.
System build_system(const ExperimentConfig &cfg);
std::vector<zoo::TailReport> pretrain_tails(System &system, const ExperimentConfig &cfg);
fed::CeReport train_ce(System &system, const ExperimentConfig &cfg, fed::CommMeter &meter);
std::vector<fed::CoReport> train_co(System &system, const ExperimentConfig &cfg, fed::CommMeter &meter);

double label_accuracy(const Matrix &logits, std::span<const int> labels);

std::vector<double> run_solo_baseline(const std::vector<zoo::DeviceState> &devices, const data::Dataset &test);
double run_input_sharing_fi(const std::vector<zoo::DeviceState> &devices, const data::Dataset &test,
                            ens::Rule rule = ens::Rule::kSoftVote, std::uint64_t seed = 0);

struct EdgeEnsemble {
  zoo::HeadSource head;
  std::vector<nn::Sequential> tails;
};

// One common head for every device; each device trains its own tail on its local data.
EdgeEnsemble train_edge_ensemble(const System &system, const ExperimentConfig &cfg);
// Combines the tails' outputs on the common feature by `rule`.
double run_edge_ensemble(const zoo::HeadSource &shared_head, const std::vector<nn::Sequential> &tails,
                         const data::Dataset &test, ens::Rule rule = ens::Rule::kSoftVote, std::uint64_t seed = 0);

// accuracy[rule][origin].
using FiAccuracy = std::map<ens::Rule, std::vector<double>>;

FiAccuracy run_ce_fi(const std::vector<zoo::DeviceState> &devices, const data::Dataset &test,
                     const std::vector<ens::Rule> &rules, fed::CommMeter &meter, std::uint64_t seed,
                     const Matrix *embedding_override = nullptr);

struct EquivalenceResult {
  // match[rule][origin]: fraction of samples with CE-FI label == input-sharing label.
  FiAccuracy match;
  std::size_t samples = 0;
};

/**
 * Builds the ideal setting: every device receives one canonical embedding per
 * sample, and each CO maps that embedding to its own tail's logits plus a
 * per-(device, sample) constant drawn from [-shift_scale, shift_scale].
 */
EquivalenceResult verify_fi_equivalence(const std::vector<zoo::DeviceState> &devices, const data::Dataset &test,
                                        const std::vector<ens::Rule> &rules, double shift_scale, std::uint64_t seed);

struct EpsilonConfig {
  double epsilon = 0.1;
  double lambda = 1.0;
  std::size_t samples = 1000;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpsilonResult {
  double lipschitz = 0.0;  // sigma_max(W2) * sigma_max(W1)
  double bound = 0.0;      // lipschitz * lambda * epsilon
  double max_deviation = 0.0;
  std::size_t samples = 0;
  std::size_t violations = 0;
  std::size_t logit_violations = 0;
  std::size_t margin_cases = 0;
  std::size_t margin_flips = 0;
};

// Two-layer CO form W2 ReLU(W1 z + b1) + b2 in double precision.
std::vector<double> co_forward_exact(const zoo::CoWeights &w, std::span<const double> z);

/**
 * Samples perturbations with |delta| <= epsilon around the given points
 * (half inside the ball, half on its surface) and checks the probability
 * deviation against the Lipschitz bound and the top-2 margin condition.
 */
EpsilonResult verify_epsilon_bound(const nn::Sequential &co, const Matrix &points, const EpsilonConfig &cfg);

struct BottleneckResult {
  // Accuracy per origin device.
  std::vector<double> baseline;
  std::vector<double> unified;
  std::vector<double> ood_excluded;
  std::vector<double> both;
};

// Retrains every CO from its initial parameters under each idealization; leaves the system's COs as baseline.
BottleneckResult run_bottleneck_suite(System &system, const ExperimentConfig &cfg,
                                      ens::Rule rule = ens::Rule::kMinEnergy);

struct CellResult {
  std::string scheme;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> solo;
  FiAccuracy ce_fi;
  double input_sharing = 0.0;
  std::optional<double> edge_ensemble;
  std::uint64_t ce_bytes = 0;
  std::uint64_t inference_bytes_per_sample = 0;
  fed::CeReport ce;
  std::vector<zoo::TailReport> tails;
  std::vector<fed::CoReport> co;
};

// Solo, CE-FI for every configured rule, input sharing and (synthetic heads only) the edge ensemble.
CellResult evaluate_cell(const System &system, const ExperimentConfig &cfg);
// build_system, training and evaluate_cell.
CellResult run_cell(const ExperimentConfig &cfg);

// ---------------------------------------------------------------- Report

struct ResultRow {
  std::string scheme;
  std::uint64_t seed = 0;
  std::string method;  // solo | ce_fi | input_sharing_fi | edge_ensemble
  std::string rule;    // ensemble rule, or "none"
  int origin = -1;     // origin device, -1 when not applicable
  double accuracy = 0.0;
};

std::vector<ResultRow> to_rows(const CellResult &cell);

struct SummaryRow {
  std::string scheme;
  std::string method;
  std::string rule;
  std::size_t seeds = 0;
  double mean = 0.0;
  double stddev = 0.0;  // n-1 denominator
};

// Per seed the rows are averaged over origin devices; then mean and std across seeds.
std::vector<SummaryRow> summarize(const std::vector<ResultRow> &rows);

extern const char *const kResultsHeader;
extern const char *const kSummaryHeader;

/**
 * Writes results.csv, summary.csv and plot_data.csv (x, y, series) into
 * `dir`. Every row carries the config hash.
 */
void emit_report(const std::vector<ResultRow> &rows, const std::filesystem::path &dir, const std::string &config_hash);
std::vector<ResultRow> parse_results_csv(const std::filesystem::path &path, std::string *config_hash = nullptr);

}  // namespace fedinfer::eval

#endif  // FEDINFER_EVALKIT_HPP_
