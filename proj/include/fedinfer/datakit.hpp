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

#ifndef FEDINFER_DATAKIT_HPP_
#define FEDINFER_DATAKIT_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fedinfer/numerics.hpp"

namespace fedinfer::data {

using SampleId = std::uint32_t;

/**
 * A set of samples by id, optionally labelled. Feature values live elsewhere
 * (a FeatureTable per head), so the same Dataset indexes every device's view
 * of the samples.
 */
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<SampleId> ids, std::optional<std::vector<int>> labels, std::size_t num_classes);

  const std::vector<SampleId> &ids() const noexcept { return ids_; }
  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }
  std::size_t num_classes() const noexcept { return num_classes_; }
  bool has_labels() const noexcept { return labels_.has_value(); }
  // Throws LabelUnavailable for unlabeled sets such as the shared pool.
  const std::vector<int> &labels() const;

  Dataset subset(std::span<const std::size_t> rows) const;
  Dataset without_labels() const { return Dataset(ids_, std::nullopt, num_classes_); }
  // Labels present at least once.
  std::set<int> label_set() const;
  std::vector<std::size_t> class_counts() const;

 private:
  std::vector<SampleId> ids_;
  std::optional<std::vector<int>> labels_;
  std::size_t num_classes_ = 0;
};

// Row-major features keyed by sample id.
class FeatureTable {
 public:
  FeatureTable() = default;
  FeatureTable(std::vector<SampleId> ids, Matrix features);

  std::size_t dim() const noexcept { return features_.cols(); }
  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<SampleId> &ids() const noexcept { return ids_; }
  const Matrix &features() const noexcept { return features_; }
  bool contains(SampleId id) const { return index_.count(id) != 0; }
  // Gathers rows in the order of `ids`; unknown ids are an InvalidInput error.
  Matrix lookup(std::span<const SampleId> ids) const;

 private:
  std::vector<SampleId> ids_;
  Matrix features_;
  std::unordered_map<SampleId, std::size_t> index_;
};

struct SyntheticTaskConfig {
  std::size_t num_classes = 10;
  std::size_t input_dim = 64;
  // Expected distance between class means, in units of within-class stddev.
  double separation = 6.0;
  double stddev = 1.0;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticTask {
  FeatureTable inputs;  // raw inputs of every train and test sample
  Dataset train;
  Dataset test;
  Matrix class_means;
};

// Isotropic Gaussian mixture with exactly balanced classes.
SyntheticTask synth_generate(const SyntheticTaskConfig &cfg);

struct HoldoutSplit {
  Dataset local_pool;
  Dataset shared;  // unlabeled
  // Ground truth for the shared pool, aligned with shared.ids(); harness-only.
  std::vector<int> shared_oracle_labels;
};

HoldoutSplit holdout_shared(const Dataset &dataset, double fraction, std::uint64_t seed);

enum class PartitionScheme { kMild, kModerate, kSkewed, kDisjoint, kDirichlet };

std::string_view to_string(PartitionScheme scheme);
PartitionScheme parse_partition_scheme(std::string_view name);

struct PartitionSpec {
  PartitionScheme scheme = PartitionScheme::kMild;
  double alpha = 0.0;
  std::size_t num_devices = 0;
  std::uint64_t seed = 0;
  // counts[device][class]
  std::vector<std::vector<std::size_t>> counts;
};

struct Partition {
  PartitionSpec spec;
  std::vector<Dataset> devices;
};

/**
 * Share of each class held by each device for the canonical manual schemes,
 * shares[device][class]; every column sums to one.
 */
std::vector<std::vector<double>> manual_shares(PartitionScheme scheme, std::size_t num_devices,
                                               std::size_t num_classes);

Partition partition_manual(const Dataset &pool, PartitionScheme scheme, std::size_t num_devices, std::uint64_t seed);
Partition partition_dirichlet(const Dataset &pool, double alpha, std::size_t num_devices, std::uint64_t seed);

// Integer allocation of `total` by proportion, largest remainder first, ties to the lowest index.
std::vector<std::size_t> largest_remainder(std::span<const double> proportions, std::size_t total);

/**
 * CEFI feature file:
 *   "CEFI" | u16 version=1 | u8 dtype=0 (f32) | u8 flags (bit0: labels)
 *   | u64 rows | u64 cols | rows*cols f32 | rows u32 ids | [rows u32 labels]
 * All integers and floats little-endian.
 */
struct FeatureFile {
  Matrix features;
  std::vector<SampleId> ids;
  std::optional<std::vector<std::uint32_t>> labels;
};

inline constexpr std::uint16_t kFeatureFileVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 24;

void write_features(const std::filesystem::path &path, const FeatureFile &file);
FeatureFile read_features(const std::filesystem::path &path);
std::string encode_features(const FeatureFile &file);
FeatureFile decode_features(std::string_view bytes);

}  // namespace fedinfer::data

#endif  // FEDINFER_DATAKIT_HPP_
