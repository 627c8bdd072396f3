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

#include "fedinfer/federation.hpp"

#include <algorithm>
#include <atomic>
#include <barrier>
#include <exception>
#include <limits>
#include <numeric>
#include <ostream>
#include <thread>

namespace fedinfer::fed {

std::string_view to_string(MessageKind kind) {
  switch (kind) {
    case MessageKind::kEmbedUp: return "EmbedUp";
    case MessageKind::kGradDown: return "GradDown";
    case MessageKind::kEmbedShare: return "EmbedShare";
    case MessageKind::kLogitsReturn: return "LogitsReturn";
  }
  return "Unknown";
}

Message::Message(MessageKind kind, std::size_t sender, std::size_t receiver, std::uint64_t round, Matrix payload,
                 std::size_t expected_width)
    : kind_(kind), sender_(sender), receiver_(receiver), round_(round), payload_(std::move(payload)) {
  if (sender_ == receiver_) throw Error(ErrorCode::kProtocolError, "message to self");
  if (payload_.cols() != expected_width) {
    throw Error(ErrorCode::kProtocolError, std::string(to_string(kind)) + " payload width " +
                                               std::to_string(payload_.cols()) + " != " +
                                               std::to_string(expected_width));
  }
}

// ------------------------------------------------------------------ Meter

void CommMeter::record(Phase phase, const Message &msg) {
  std::lock_guard lock(mutex_);
  const std::uint64_t b = msg.byte_size();
  switch (phase) {
    case Phase::kCeTraining:
      ce_ += b;
      if (epochs_.empty()) epochs_.push_back(0);
      epochs_.back() += b;
      trace_.push_back({msg.round(), msg.kind(), msg.sender(), msg.receiver(), b});
      break;
    case Phase::kCoTraining:
      co_ += b;
      break;
    case Phase::kInference:
      inference_ += b;
      break;
  }
}

void CommMeter::begin_epoch() {
  std::lock_guard lock(mutex_);
  epochs_.push_back(0);
}

std::uint64_t CommMeter::bytes(Phase phase) const {
  std::lock_guard lock(mutex_);
  switch (phase) {
    case Phase::kCeTraining: return ce_;
    case Phase::kCoTraining: return co_;
    case Phase::kInference: return inference_;
  }
  return 0;
}

std::vector<std::uint64_t> CommMeter::ce_epoch_bytes() const {
  std::lock_guard lock(mutex_);
  return epochs_;
}

std::vector<TraceRecord> CommMeter::trace() const {
  std::lock_guard lock(mutex_);
  std::vector<TraceRecord> out = trace_;
  std::sort(out.begin(), out.end());
  return out;
}

void CommMeter::write_trace(std::ostream &out) const {
  for (const auto &r : trace()) {
    out << r.round << ' ' << to_string(r.kind) << ' ' << r.sender << ' ' << r.receiver << ' ' << r.bytes << '\n';
  }
}

// ----------------------------------------------------------------- Config

void FederationConfig::validate(std::size_t num_devices) const {
  if (num_devices < 2) throw Error(ErrorCode::kInvalidConfig, "federation needs K >= 2 devices");
  if (aggregator == AggregatorPolicy::kFixed && fixed_aggregator >= num_devices) {
    throw Error(ErrorCode::kInvalidConfig, "fixed aggregator id out of range");
  }
  if (ce_batch < 2) throw Error(ErrorCode::kInvalidConfig, "CE batch must be >= 2");
  if (co_batch < 1) throw Error(ErrorCode::kInvalidConfig, "CO batch must be >= 1");
  if (ce_patience < 1) throw Error(ErrorCode::kInvalidConfig, "CE patience must be >= 1");
  contrastive.validate();
  distill.validate();
}

// ----------------------------------------------------------------- Actors

namespace {

/**
 * One worker thread per device. run() hands every worker the same task and
 * returns once all have finished; the first failure by device index is
 * rethrown on the caller.
 */
class ActorPool {
 public:
  explicit ActorPool(std::size_t size)
      : start_(static_cast<std::ptrdiff_t>(size + 1)), done_(static_cast<std::ptrdiff_t>(size + 1)), errors_(size) {
    for (std::size_t k = 0; k < size; ++k) {
      workers_.emplace_back([this, k] {
        for (;;) {
          start_.arrive_and_wait();
          if (stop_) return;
          try {
            (*task_)(k);
          } catch (...) {
            errors_[k] = std::current_exception();
          }
          done_.arrive_and_wait();
        }
      });
    }
  }

  ActorPool(const ActorPool &) = delete;
  ActorPool &operator=(const ActorPool &) = delete;

  ~ActorPool() {
    stop_ = true;
    start_.arrive_and_wait();
  }

  void run(const std::function<void(std::size_t)> &task) {
    task_ = &task;
    std::fill(errors_.begin(), errors_.end(), nullptr);
    start_.arrive_and_wait();
    done_.arrive_and_wait();
    for (auto &e : errors_) {
      if (e) std::rethrow_exception(e);
    }
  }

 private:
  std::barrier<> start_;
  std::barrier<> done_;
  std::vector<std::exception_ptr> errors_;
  const std::function<void(std::size_t)> *task_ = nullptr;
  std::atomic<bool> stop_{false};
  std::vector<std::jthread> workers_;
};

void for_each_device(std::size_t k, ActorPool *pool, const std::function<void(std::size_t)> &task) {
  if (pool) {
    pool->run(task);
    return;
  }
  for (std::size_t d = 0; d < k; ++d) task(d);
}

// In-memory network: per-receiver inboxes, delivered in sender order.
class Network {
 public:
  explicit Network(std::size_t k) : inbox_(k) {}

  void send(Message msg) {
    std::lock_guard lock(mutex_);
    inbox_.at(msg.receiver()).push_back(std::move(msg));
  }

  std::vector<Message> drain(std::size_t receiver) {
    std::lock_guard lock(mutex_);
    std::vector<Message> out = std::move(inbox_.at(receiver));
    inbox_[receiver].clear();
    std::sort(out.begin(), out.end(), [](const Message &a, const Message &b) { return a.sender() < b.sender(); });
    return out;
  }

 private:
  std::mutex mutex_;
  std::vector<std::vector<Message>> inbox_;
};

double run_round(std::vector<zoo::DeviceState> &devices, const std::vector<Matrix> &batch_features,
                 CeOptimizers &optimizers, const RoundContext &ctx, const FederationConfig &cfg, CommMeter &meter,
                 const FaultHook &fault, ActorPool *pool) {
  const std::size_t k = devices.size();
  const std::size_t agg = ctx.aggregator;
  if (agg >= k) throw Error(ErrorCode::kInvalidConfig, "aggregator id out of range");
  if (batch_features.size() != k || optimizers.adam.size() != k) {
    throw Error(ErrorCode::kShapeError, "round inputs do not match device count");
  }
  const std::size_t width = zoo::co_weights(devices.front().co).first->in_features();

  // Abort restores these; they include each dropout stream's position.
  std::vector<nn::Sequential> backup;
  backup.reserve(k);
  for (const auto &d : devices) backup.push_back(d.ce);

  Network net(k);
  std::vector<Matrix> own(k);
  std::vector<char> dropped(k, 0);
  std::vector<Message> sent_up, sent_down;
  std::mutex sent_mutex;

  // Phase A: local embedding, uplink to the aggregator.
  for_each_device(k, pool, [&](std::size_t d) {
    if (fault && fault(ctx.round, ctx.attempt, d)) {
      dropped[d] = 1;
      return;
    }
    own[d] = devices[d].ce.forward(batch_features[d], nn::Mode::kTrain);
    if (d != agg) {
      Message msg(MessageKind::kEmbedUp, d, agg, ctx.round, own[d], width);
      {
        std::lock_guard lock(sent_mutex);
        sent_up.push_back(msg);
      }
      net.send(std::move(msg));
    }
  });
  if (std::any_of(dropped.begin(), dropped.end(), [](char c) { return c != 0; })) {
    for (std::size_t d = 0; d < k; ++d) devices[d].ce = std::move(backup[d]);
    throw Error(ErrorCode::kRoundAborted, "device dropped out of CE round " + std::to_string(ctx.round));
  }

  // Phase B: the aggregator scores the batch and returns per-device gradients.
  double loss = 0.0;
  Matrix own_grad;
  for_each_device(k, pool, [&](std::size_t d) {
    if (d != agg) return;
    std::vector<Matrix> all(k);
    all[agg] = own[agg];
    for (Message &m : net.drain(agg)) all[m.sender()] = m.payload();
    const auto result = losses::consensus_loss(all, cfg.contrastive);
    loss = result.value;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == agg) {
        own_grad = result.grads[o];
        continue;
      }
      Message msg(MessageKind::kGradDown, agg, o, ctx.round, result.grads[o], width);
      {
        std::lock_guard lock(sent_mutex);
        sent_down.push_back(msg);
      }
      net.send(std::move(msg));
    }
  });

  // Phase C: every device applies its own update.
  for_each_device(k, pool, [&](std::size_t d) {
    Matrix grad;
    if (d == agg) {
      grad = own_grad;
    } else {
      auto inbox = net.drain(d);
      if (inbox.size() != 1) throw Error(ErrorCode::kProtocolError, "expected one GradDown");
      grad = inbox.front().payload();
    }
    devices[d].ce.zero_grad();
    devices[d].ce.backward(grad);
    optimizers.adam[d].step(devices[d].ce, ctx.progress);
  });

  for (const auto *batch : {&sent_up, &sent_down}) {
    for (const Message &m : *batch) meter.record(Phase::kCeTraining, m);
  }
  return loss;
}

}  // namespace

double train_ce_round(std::vector<zoo::DeviceState> &devices, const std::vector<Matrix> &batch_features,
                      CeOptimizers &optimizers, const RoundContext &ctx, const FederationConfig &cfg,
                      CommMeter &meter, const FaultHook &fault) {
  cfg.validate(devices.size());
  if (cfg.mode == ExecutionMode::kThreaded) {
    ActorPool pool(devices.size());
    return run_round(devices, batch_features, optimizers, ctx, cfg, meter, fault, &pool);
  }
  return run_round(devices, batch_features, optimizers, ctx, cfg, meter, fault, nullptr);
}

CeReport train_ce(std::vector<zoo::DeviceState> &devices, std::span<const data::SampleId> shared_ids,
                  const FederationConfig &cfg, CommMeter &meter, const FaultHook &fault) {
  cfg.validate(devices.size());
  const std::size_t k = devices.size(), n = shared_ids.size();
  if (n < 2) throw Error(ErrorCode::kInvalidBatch, "CE training needs >= 2 shared samples");
  std::vector<Matrix> features;
  for (const auto &d : devices) features.push_back(d.features(shared_ids));

  CeOptimizers optimizers;
  for (std::size_t d = 0; d < k; ++d) optimizers.adam.emplace_back(cfg.adam);
  std::optional<ActorPool> pool;
  if (cfg.mode == ExecutionMode::kThreaded) pool.emplace(k);

  // A lone trailing sample cannot form a contrastive batch; it joins the previous batch.
  std::size_t per_epoch = n / cfg.ce_batch;
  if (n % cfg.ce_batch >= 2 || per_epoch == 0) ++per_epoch;
  const double total_steps = static_cast<double>(per_epoch * cfg.ce_epochs);

  Rng shuffle_rng(mix_seed(cfg.seed, 0xce5f));
  CeReport report;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < cfg.ce_epochs; ++epoch) {
    meter.begin_epoch();
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(order);
    double epoch_total = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * cfg.ce_batch;
      const std::size_t end = b + 1 == per_epoch ? n : begin + cfg.ce_batch;
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<Matrix> batch;
      for (const Matrix &f : features) batch.push_back(f.gather_rows(rows));
      RoundContext ctx;
      ctx.round = report.rounds;
      ctx.aggregator = cfg.aggregator == AggregatorPolicy::kFixed ? cfg.fixed_aggregator : report.rounds % k;
      ctx.progress = static_cast<double>(report.rounds) / total_steps;
      for (;; ++ctx.attempt) {
        try {
          epoch_total += run_round(devices, batch, optimizers, ctx, cfg, meter, fault, pool ? &*pool : nullptr) *
                         static_cast<double>(rows.size());
          break;
        } catch (const Error &e) {
          if (e.code() != ErrorCode::kRoundAborted || ctx.attempt >= cfg.max_round_retries) throw;
          ++report.aborted_rounds;
        }
      }
      ++report.rounds;
    }
    const double epoch_loss = epoch_total / static_cast<double>(n);
    report.epoch_loss.push_back(epoch_loss);
    if (epoch_loss < best - cfg.ce_min_delta) {
      best = epoch_loss;
      stale = 0;
    } else if (++stale >= cfg.ce_patience) {
      report.early_stopped = true;
      break;
    }
  }
  return report;
}

// -------------------------------------------------------------------- CO

CoReport train_co_local(zoo::DeviceState &device, std::span<const data::SampleId> shared_ids,
                        const FederationConfig &cfg, CommMeter &meter, const CoOptions &options) {
  (void)meter;  // CO training is purely local; nothing is recorded.
  cfg.distill.validate();
  const Matrix features = device.features(shared_ids);
  const Matrix embeddings = options.embedding_override ? *options.embedding_override : zoo::embed(device, features);
  if (embeddings.rows() != shared_ids.size()) {
    throw Error(ErrorCode::kShapeError, "CO embedding override does not match the shared set");
  }
  const Matrix teacher_all = zoo::solo_predict(device, features);
  std::vector<std::size_t> rows;
  if (options.rows) {
    rows = *options.rows;
  } else {
    rows.resize(shared_ids.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
  }
  if (rows.empty()) throw Error(ErrorCode::kInvalidConfig, "CO training set is empty");
  const Matrix x = embeddings.gather_rows(rows);
  const Matrix teacher = teacher_all.gather_rows(rows);
  const double n = static_cast<double>(rows.size());

  CoReport report;
  report.samples = rows.size();
  report.initial_loss = losses::distill_loss(device.co.predict(x), teacher, cfg.distill).value / n;
  const std::uint64_t seed = options.seed.value_or(mix_seed(cfg.seed, 0xc0 + device.id));
  Rng rng(mix_seed(seed, 0xc0b));
  nn::Adam adam(cfg.adam);
  const std::size_t per_epoch = (rows.size() + cfg.co_batch - 1) / cfg.co_batch;
  const double total_steps = static_cast<double>(per_epoch * cfg.co_epochs);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.co_epochs; ++epoch) {
    for (const auto &batch : nn::make_batches(rows.size(), cfg.co_batch, rng)) {
      device.co.zero_grad();
      const Matrix out = device.co.forward(x.gather_rows(batch), nn::Mode::kTrain);
      device.co.backward(losses::distill_loss(out, teacher.gather_rows(batch), cfg.distill).grad);
      adam.step(device.co, static_cast<double>(step++) / total_steps);
    }
  }
  report.final_loss = losses::distill_loss(device.co.predict(x), teacher, cfg.distill).value / n;
  return report;
}

Matrix idealize_consensus(const std::vector<zoo::DeviceState> &devices, std::span<const data::SampleId> ids) {
  if (devices.empty()) throw Error(ErrorCode::kInvalidInput, "no devices to idealize");
  std::vector<double> sum;
  std::size_t cols = 0;
  for (const auto &d : devices) {
    const Matrix z = zoo::embed(d, d.features(ids));
    if (sum.empty()) {
      sum.assign(z.size(), 0.0);
      cols = z.cols();
    }
    for (std::size_t i = 0; i < z.size(); ++i) sum[i] += z.data()[i];
  }
  Matrix mean(ids.size(), cols);
  for (std::size_t i = 0; i < mean.size(); ++i) {
    mean.data()[i] = static_cast<float>(sum[i] / static_cast<double>(devices.size()));
  }
  return mean;
}

std::vector<std::size_t> exclude_ood_for_co(const zoo::DeviceState &device, std::span<const int> shared_labels) {
  const auto seen = device.local.label_set();
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < shared_labels.size(); ++r) {
    if (seen.count(shared_labels[r])) rows.push_back(r);
  }
  if (rows.empty()) throw Error(ErrorCode::kInvalidConfig, "no shared samples fall in the device's label set");
  return rows;
}

// ------------------------------------------------------------- Inference

InferenceResult federated_infer(std::size_t origin, std::span<const data::SampleId> ids,
                                const std::vector<zoo::DeviceState> &devices, CommMeter &meter,
                                const InferenceOptions &options) {
  const std::size_t k = devices.size();
  if (origin >= k) throw Error(ErrorCode::kInvalidInput, "origin device out of range");
  const zoo::DeviceState &home = devices[origin];
  const Matrix z = options.embedding_override ? *options.embedding_override
                                              : zoo::embed(home, home.features(ids));
  if (z.rows() != ids.size()) throw Error(ErrorCode::kShapeError, "embedding rows do not match the sample batch");
  const auto run_co = [&](std::size_t d, const Matrix &emb) {
    return options.co_override ? options.co_override(d, emb, ids) : zoo::co_predict(devices[d], emb);
  };

  InferenceResult result;
  result.logits.resize(k);
  result.logits[origin] = run_co(origin, z);
  for (std::size_t d = 0; d < k; ++d) {
    if (d == origin) continue;
    const Message share(MessageKind::kEmbedShare, origin, d, 0, z, z.cols());
    meter.record(Phase::kInference, share);
    const Message reply(MessageKind::kLogitsReturn, d, origin, 0, run_co(d, share.payload()), devices[d].num_classes);
    meter.record(Phase::kInference, reply);
    result.bytes += share.byte_size() + reply.byte_size();
    result.logits[d] = reply.payload();
  }
  return result;
}

std::uint64_t inference_bytes_per_sample(std::size_t num_devices, std::size_t embed_dim, std::size_t num_classes) {
  if (num_devices == 0) return 0;
  return static_cast<std::uint64_t>(num_devices - 1) * (embed_dim * 4 + num_classes * 4);
}

std::uint64_t ce_bytes_per_epoch(std::size_t num_devices, std::size_t shared_samples, std::size_t embed_dim) {
  if (num_devices == 0) return 0;
  return 2ull * (num_devices - 1) * shared_samples * embed_dim * 4;
}

}  // namespace fedinfer::fed
