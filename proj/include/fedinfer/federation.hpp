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

#ifndef FEDINFER_FEDERATION_HPP_
#define FEDINFER_FEDERATION_HPP_

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fedinfer/ensemble.hpp"
#include "fedinfer/losses.hpp"
#include "fedinfer/model_zoo.hpp"

namespace fedinfer::fed {

enum class MessageKind { kEmbedUp, kGradDown, kEmbedShare, kLogitsReturn };

std::string_view to_string(MessageKind kind);

/**
 * An immutable payload between two devices. Embedding-type messages must be
 * exactly embed_dim wide and logit returns exactly num_classes wide, so raw
 * inputs and parameters cannot travel under any kind.
 */
class Message {
 public:
  Message(MessageKind kind, std::size_t sender, std::size_t receiver, std::uint64_t round, Matrix payload,
          std::size_t expected_width);

  MessageKind kind() const noexcept { return kind_; }
  std::size_t sender() const noexcept { return sender_; }
  std::size_t receiver() const noexcept { return receiver_; }
  std::uint64_t round() const noexcept { return round_; }
  const Matrix &payload() const noexcept { return payload_; }
  // Payload floats times four; no framing.
  std::uint64_t byte_size() const noexcept { return payload_.size() * 4; }

 private:
  MessageKind kind_;
  std::size_t sender_;
  std::size_t receiver_;
  std::uint64_t round_;
  Matrix payload_;
};

enum class Phase { kCeTraining, kCoTraining, kInference };

struct TraceRecord {
  std::uint64_t round = 0;
  MessageKind kind = MessageKind::kEmbedUp;
  std::size_t sender = 0;
  std::size_t receiver = 0;
  std::uint64_t bytes = 0;

  auto operator<=>(const TraceRecord &) const = default;
};

// Byte counters per phase and per CE epoch, plus the message trace. Thread-safe.
class CommMeter {
 public:
  void record(Phase phase, const Message &msg);
  void begin_epoch();

  std::uint64_t bytes(Phase phase) const;
  std::vector<std::uint64_t> ce_epoch_bytes() const;
  // Records sorted by (round, kind, sender, receiver).
  std::vector<TraceRecord> trace() const;
  // One line per message: round kind sender receiver bytes.
  void write_trace(std::ostream &out) const;

 private:
  mutable std::mutex mutex_;
  std::uint64_t ce_ = 0;
  std::uint64_t co_ = 0;
  std::uint64_t inference_ = 0;
  std::vector<std::uint64_t> epochs_;
  std::vector<TraceRecord> trace_;
};

enum class AggregatorPolicy { kFixed, kRoundRobin };
enum class ExecutionMode { kSingleThreaded, kThreaded };

struct FederationConfig {
  AggregatorPolicy aggregator = AggregatorPolicy::kRoundRobin;
  std::size_t fixed_aggregator = 0;
  ExecutionMode mode = ExecutionMode::kSingleThreaded;
  std::size_t ce_epochs = 100;
  std::size_t ce_batch = 512;
  std::size_t ce_patience = 10;
  double ce_min_delta = 1e-4;
  std::size_t co_epochs = 20;
  std::size_t co_batch = 64;
  std::size_t max_round_retries = 3;
  losses::ContrastiveConfig contrastive;
  losses::DistillConfig distill;
  nn::AdamConfig adam;
  std::uint64_t seed = 0;

  void validate(std::size_t num_devices) const;
};

// Decides whether `device` drops out of attempt `attempt` of round `round`.
using FaultHook = std::function<bool(std::uint64_t round, std::uint32_t attempt, std::size_t device)>;

// Per-device optimizer state for CE training.
struct CeOptimizers {
  std::vector<nn::Adam> adam;
};

struct RoundContext {
  std::uint64_t round = 0;
  std::uint32_t attempt = 0;
  std::size_t aggregator = 0;
  double progress = 0.0;
};

/**
 * One CE round on a shared batch. Every device embeds its own features of
 * the batch; non-aggregators send EmbedUp; the aggregator evaluates the
 * consensus loss and returns each device's embedding gradient as GradDown;
 * every device then updates its CE layer. A dropout anywhere aborts the
 * round with RoundAborted before any parameter or optimizer changes.
 * batch_features[k] holds device k's head features for the batch.
 */
double train_ce_round(std::vector<zoo::DeviceState> &devices, const std::vector<Matrix> &batch_features,
                      CeOptimizers &optimizers, const RoundContext &ctx, const FederationConfig &cfg,
                      CommMeter &meter, const FaultHook &fault = {});

struct CeReport {
  std::vector<double> epoch_loss;
  std::uint64_t rounds = 0;
  std::uint64_t aborted_rounds = 0;
  bool early_stopped = false;
};

// Full CE training over the shared ids with a seeded per-epoch shuffle common to all devices.
CeReport train_ce(std::vector<zoo::DeviceState> &devices, std::span<const data::SampleId> shared_ids,
                  const FederationConfig &cfg, CommMeter &meter, const FaultHook &fault = {});

struct CoOptions {
  // Replaces the device's own CE output as CO input (consensus unification).
  const Matrix *embedding_override = nullptr;
  // Restricts training to these rows of the shared set (OOD exclusion).
  std::optional<std::vector<std::size_t>> rows;
  // Training seed; defaults to the federation seed mixed with the device id.
  std::optional<std::uint64_t> seed;
};

struct CoReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t samples = 0;
};

/**
 * Local distillation of the CO layer against the device's own tail on the
 * shared set. Teacher logits and embeddings are computed once in eval mode.
 * Nothing crosses the network.
 */
CoReport train_co_local(zoo::DeviceState &device, std::span<const data::SampleId> shared_ids,
                        const FederationConfig &cfg, CommMeter &meter, const CoOptions &options = {});

// Mean of every device's eval-mode embedding of each sample.
Matrix idealize_consensus(const std::vector<zoo::DeviceState> &devices, std::span<const data::SampleId> ids);

// Shared rows whose true label the device has seen locally.
std::vector<std::size_t> exclude_ood_for_co(const zoo::DeviceState &device, std::span<const int> shared_labels);

struct InferenceOptions {
  // Canonical embeddings used by every device in place of CE outputs.
  const Matrix *embedding_override = nullptr;
  // Replaces a device's CO with an arbitrary map from (device, sample row, embedding) to logits.
  std::function<Matrix(std::size_t device, const Matrix &embeddings, std::span<const data::SampleId> ids)> co_override;
};

struct InferenceResult {
  // logits[k] is device k's CO output for every sample, in device order.
  std::vector<Matrix> logits;
  std::uint64_t bytes = 0;
};

/**
 * Inference from `origin` on a batch of samples: the origin embeds, shares
 * the embeddings with the K-1 others (EmbedShare), each runs its CO and
 * returns logits (LogitsReturn). Per sample this moves (K-1)*d*4 + (K-1)*C*4
 * bytes.
 */
InferenceResult federated_infer(std::size_t origin, std::span<const data::SampleId> ids,
                                const std::vector<zoo::DeviceState> &devices, CommMeter &meter,
                                const InferenceOptions &options = {});

// Closed forms for the meter audit.
std::uint64_t inference_bytes_per_sample(std::size_t num_devices, std::size_t embed_dim, std::size_t num_classes);
std::uint64_t ce_bytes_per_epoch(std::size_t num_devices, std::size_t shared_samples, std::size_t embed_dim);

}  // namespace fedinfer::fed

#endif  // FEDINFER_FEDERATION_HPP_
