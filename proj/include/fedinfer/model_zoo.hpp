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

#ifndef FEDINFER_MODEL_ZOO_HPP_
#define FEDINFER_MODEL_ZOO_HPP_

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedinfer/datakit.hpp"
#include "fedinfer/nn.hpp"

namespace fedinfer::zoo {

inline constexpr std::size_t kEmbedDim = 256;

struct ArchConfig {
  std::size_t head_dim = 128;
  std::size_t tail_hidden = 1024;
  double tail_dropout = 0.3;
  std::size_t ce_hidden = 256;
  double ce_dropout = 0.1;
  std::size_t co_hidden = 256;
  double co_dropout = 0.3;
  std::size_t embed_dim = kEmbedDim;

  void validate() const;
};

/**
 * Where a device's intermediate features come from. A synthetic head is a
 * frozen random Linear+ReLU over shared raw inputs; a file-backed head serves
 * precomputed features by sample id. Either way the mapping is fixed.
 */
class HeadSource {
 public:
  enum class Kind { kSynthetic, kFileBacked };

  HeadSource() = default;
  static HeadSource synthetic(std::shared_ptr<const data::FeatureTable> raw, std::size_t out_dim, std::uint64_t seed);
  static HeadSource file_backed(std::shared_ptr<const data::FeatureTable> features);

  Kind kind() const noexcept { return kind_; }
  std::size_t feature_dim() const noexcept { return feature_dim_; }
  std::uint64_t seed() const noexcept { return seed_; }
  Matrix features(std::span<const data::SampleId> ids) const;
  // Synthetic heads only: applies the projection to raw input rows.
  Matrix project(const Matrix &raw) const;

 private:
  Kind kind_ = Kind::kFileBacked;
  std::size_t feature_dim_ = 0;
  std::uint64_t seed_ = 0;
  std::shared_ptr<const data::FeatureTable> table_;
  std::shared_ptr<const nn::Sequential> projection_;
};

nn::Sequential make_tail(std::size_t in_dim, std::size_t num_classes, const ArchConfig &arch, std::uint64_t seed);
// LayerNorm(proj(x) + Drop(ReLU(FC2(Drop(ReLU(FC1(x))))))); proj is the identity when in_dim == embed_dim.
nn::Sequential make_ce(std::size_t in_dim, const ArchConfig &arch, std::uint64_t seed);
// FC1 -> ReLU -> Dropout -> FC2.
nn::Sequential make_co(std::size_t num_classes, const ArchConfig &arch, std::uint64_t seed);

// The two linear maps of a CO stack, for the Lipschitz bound.
struct CoWeights {
  const nn::Linear *first = nullptr;
  const nn::Linear *second = nullptr;
};
CoWeights co_weights(const nn::Sequential &co);

struct DeviceState {
  std::size_t id = 0;
  HeadSource head;
  nn::Sequential tail;
  nn::Sequential ce;
  nn::Sequential co;
  std::size_t num_classes = 0;
  data::Dataset local;
  std::uint64_t seed = 0;

  Matrix features(std::span<const data::SampleId> ids) const { return head.features(ids); }
};

DeviceState make_device(std::size_t id, HeadSource head, std::size_t num_classes, data::Dataset local,
                        const ArchConfig &arch, std::uint64_t seed);

// Eval-mode forwards; every input dimension is checked.
Matrix embed(const DeviceState &device, const Matrix &features);
Matrix co_predict(const DeviceState &device, const Matrix &embeddings);
Matrix solo_predict(const DeviceState &device, const Matrix &features);

struct TailReport {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_validation_loss = 0.0;
};

/**
 * Supervised tail training on the device's local data. The last fraction of
 * a seeded shuffle is held out; training stops after `patience` epochs
 * without a lower validation loss and the best parameters are restored.
 */
TailReport pretrain_tail(DeviceState &device, const nn::TrainLoopConfig &loop, const nn::AdamConfig &adam);

// Named tensors in a binary container tagged with the producing config hash.
struct Checkpoint {
  std::string config_hash;
  std::vector<std::pair<std::string, Matrix>> tensors;
};

std::string encode_checkpoint(const Checkpoint &ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void write_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt);
Checkpoint read_checkpoint(const std::filesystem::path &path);

// Tail, CE and CO parameters under "tail.", "ce.", "co." prefixes.
Checkpoint device_checkpoint(const DeviceState &device, const std::string &config_hash);
void load_device_checkpoint(DeviceState &device, const Checkpoint &ckpt);

}  // namespace fedinfer::zoo

#endif  // FEDINFER_MODEL_ZOO_HPP_
