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

#include <gtest/gtest.h>

#include <sstream>

#include "fedinfer/federation.hpp"
#include "fixtures.hpp"

namespace fedinfer::fed {
namespace {

using fixture::bit_equal;
using fixture::same_parameters;

FederationConfig quick_config() {
  FederationConfig cfg;
  cfg.ce_epochs = 4;
  cfg.ce_batch = 16;
  cfg.co_epochs = 3;
  cfg.co_batch = 16;
  cfg.seed = 5;
  return cfg;
}

std::vector<Matrix> batch_features(const std::vector<zoo::DeviceState> &devices,
                                   std::span<const data::SampleId> ids) {
  std::vector<Matrix> out;
  for (const auto &d : devices) out.push_back(d.features(ids));
  return out;
}

CeOptimizers optimizers_for(std::size_t k) { return CeOptimizers{std::vector<nn::Adam>(k)}; }

TEST(Message, PayloadWidthIsEnforced) {
  EXPECT_NO_THROW(Message(MessageKind::kEmbedUp, 0, 1, 0, Matrix(3, 256), 256));
  for (auto [width, sender, receiver] : {std::tuple{255u, 0u, 1u}, std::tuple{256u, 1u, 1u}}) {
    try {
      Message(MessageKind::kEmbedShare, sender, receiver, 0, Matrix(3, width), 256);
      FAIL() << "expected ProtocolError";
    } catch (const Error &e) {
      EXPECT_EQ(e.code(), ErrorCode::kProtocolError);
    }
  }
  const Message m(MessageKind::kLogitsReturn, 2, 0, 4, Matrix(5, 10), 10);
  EXPECT_EQ(m.byte_size(), 5u * 10u * 4u);
}

TEST(CeRound, BytesForFullSizeBatch) {
  auto sys = fixture::make_small_system(3, 7, zoo::ArchConfig{}, 200);
  std::vector<data::SampleId> ids(sys.task.train.ids().begin(), sys.task.train.ids().begin() + 512);
  CommMeter meter;
  auto opt = optimizers_for(3);
  FederationConfig cfg;
  train_ce_round(sys.devices, batch_features(sys.devices, ids), opt, {0, 0, 1, 0.0}, cfg, meter);
  EXPECT_EQ(meter.bytes(Phase::kCeTraining), 2097152u);
  for (const auto &rec : meter.trace()) {
    if (rec.kind == MessageKind::kEmbedUp) EXPECT_NE(rec.sender, 1u);
    if (rec.kind == MessageKind::kGradDown) EXPECT_EQ(rec.sender, 1u);
  }
  EXPECT_EQ(meter.trace().size(), 4u);
}

TEST(CeRound, HeadsAndTailsAreUntouched) {
  auto sys = fixture::make_small_system();
  const auto before = sys.devices;
  CommMeter meter;
  auto opt = optimizers_for(3);
  const auto ids = sys.split.shared.ids();
  train_ce_round(sys.devices, batch_features(sys.devices, ids), opt, {}, quick_config(), meter);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_TRUE(same_parameters(before[k].tail, sys.devices[k].tail));
    EXPECT_TRUE(same_parameters(before[k].co, sys.devices[k].co));
    EXPECT_FALSE(same_parameters(before[k].ce, sys.devices[k].ce));
    EXPECT_TRUE(bit_equal(before[k].features(ids), sys.devices[k].features(ids)));
  }
}

TEST(CeRound, AbortedRoundLeavesEveryDeviceUnchanged) {
  auto sys = fixture::make_small_system();
  const auto ids = sys.split.shared.ids();
  const auto feats = batch_features(sys.devices, ids);
  auto opt = optimizers_for(3);
  CommMeter meter;
  // One clean round first so the optimizers carry state.
  train_ce_round(sys.devices, feats, opt, {0, 0, 0, 0.0}, quick_config(), meter);
  const auto before = sys.devices;
  const auto bytes_before = meter.bytes(Phase::kCeTraining);
  const FaultHook drop_device_two = [](std::uint64_t, std::uint32_t, std::size_t d) { return d == 2; };
  try {
    train_ce_round(sys.devices, feats, opt, {1, 0, 0, 0.1}, quick_config(), meter, drop_device_two);
    FAIL() << "expected RoundAborted";
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::kRoundAborted);
  }
  for (std::size_t k = 0; k < 3; ++k) EXPECT_TRUE(same_parameters(before[k].ce, sys.devices[k].ce));
  EXPECT_EQ(meter.bytes(Phase::kCeTraining), bytes_before);

  // The next clean round matches what the aborted one would have produced.
  auto replay = before;
  auto opt_replay = opt;
  CommMeter m1, m2;
  train_ce_round(sys.devices, feats, opt, {1, 1, 0, 0.1}, quick_config(), m1);
  train_ce_round(replay, feats, opt_replay, {1, 0, 0, 0.1}, quick_config(), m2);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_TRUE(same_parameters(replay[k].ce, sys.devices[k].ce));
}

TEST(CeTraining, RetriedRoundsMatchFaultFreeRun) {
  auto clean = fixture::make_small_system();
  auto faulty = fixture::make_small_system();
  CommMeter m1, m2;
  const auto ids = clean.split.shared.ids();
  const auto r1 = train_ce(clean.devices, ids, quick_config(), m1);
  const FaultHook flaky = [](std::uint64_t round, std::uint32_t attempt, std::size_t d) {
    return round % 3 == 1 && attempt < 2 && d == round % 3;
  };
  const auto r2 = train_ce(faulty.devices, ids, quick_config(), m2, flaky);
  EXPECT_EQ(r1.aborted_rounds, 0u);
  EXPECT_GT(r2.aborted_rounds, 0u);
  EXPECT_EQ(r1.rounds, r2.rounds);
  EXPECT_EQ(r1.epoch_loss, r2.epoch_loss);
  EXPECT_EQ(m1.trace(), m2.trace());
  for (std::size_t k = 0; k < 3; ++k) EXPECT_TRUE(same_parameters(clean.devices[k].ce, faulty.devices[k].ce));
}

TEST(CeTraining, PersistentFaultPropagates) {
  auto sys = fixture::make_small_system();
  CommMeter meter;
  const FaultHook always = [](std::uint64_t, std::uint32_t, std::size_t d) { return d == 0; };
  EXPECT_THROW(train_ce(sys.devices, sys.split.shared.ids(), quick_config(), meter, always), Error);
}

TEST(CeTraining, ThreadedAndSingleThreadedAgreeBitwise) {
  auto single = fixture::make_small_system();
  auto threaded = fixture::make_small_system();
  auto cfg = quick_config();
  CommMeter m1, m2;
  const auto r1 = train_ce(single.devices, single.split.shared.ids(), cfg, m1);
  cfg.mode = ExecutionMode::kThreaded;
  const auto r2 = train_ce(threaded.devices, threaded.split.shared.ids(), cfg, m2);
  EXPECT_EQ(r1.epoch_loss, r2.epoch_loss);
  EXPECT_EQ(m1.trace(), m2.trace());
  for (std::size_t k = 0; k < 3; ++k) EXPECT_TRUE(same_parameters(single.devices[k].ce, threaded.devices[k].ce));
}

TEST(CeTraining, AggregatorPlacementDoesNotChangeTheResult) {
  auto rotating = fixture::make_small_system();
  auto fixed = fixture::make_small_system();
  auto cfg = quick_config();
  CommMeter m1, m2;
  train_ce(rotating.devices, rotating.split.shared.ids(), cfg, m1);
  cfg.aggregator = AggregatorPolicy::kFixed;
  cfg.fixed_aggregator = 2;
  train_ce(fixed.devices, fixed.split.shared.ids(), cfg, m2);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_TRUE(same_parameters(rotating.devices[k].ce, fixed.devices[k].ce));
  EXPECT_EQ(m1.bytes(Phase::kCeTraining), m2.bytes(Phase::kCeTraining));
  for (const auto &rec : m2.trace()) {
    if (rec.kind == MessageKind::kEmbedUp) EXPECT_EQ(rec.receiver, 2u);
  }
}

TEST(CeTraining, EpochBytesMatchClosedForm) {
  for (std::size_t k : {2u, 3u, 4u}) {
    for (std::size_t batch : {16u, 7u, 1000u}) {
      auto sys = fixture::make_small_system(k);
      auto cfg = quick_config();
      cfg.ce_epochs = 2;
      cfg.ce_batch = batch;
      CommMeter meter;
      const auto ids = sys.split.shared.ids();
      train_ce(sys.devices, ids, cfg, meter);
      const auto per_epoch = meter.ce_epoch_bytes();
      ASSERT_EQ(per_epoch.size(), 2u);
      for (auto b : per_epoch) EXPECT_EQ(b, ce_bytes_per_epoch(k, ids.size(), fixture::small_arch().embed_dim));
      EXPECT_EQ(meter.bytes(Phase::kCoTraining), 0u);
    }
  }
}

TEST(CeTraining, ConsensusLossFallsAndEmbeddingsConverge) {
  auto sys = fixture::make_small_system(3, 11, fixture::small_arch(), 120);
  const auto ids = sys.split.shared.ids();
  const auto spread = [&] {
    std::vector<Matrix> z;
    for (const auto &d : sys.devices) z.push_back(zoo::embed(d, d.features(ids)));
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t r = 0; r < ids.size(); ++r) {
      for (std::size_t i = 0; i < z.size(); ++i) {
        for (std::size_t j = i + 1; j < z.size(); ++j, ++pairs) total += l2_distance(z[i].row(r), z[j].row(r));
      }
    }
    return total / static_cast<double>(pairs);
  };
  const double initial = spread();
  auto cfg = quick_config();
  cfg.ce_epochs = 150;
  cfg.ce_batch = 32;
  CommMeter meter;
  const auto report = train_ce(sys.devices, ids, cfg, meter);
  ASSERT_GE(report.epoch_loss.size(), 10u);
  std::size_t non_improving = 0;
  for (std::size_t e = 1; e < 10; ++e) non_improving += report.epoch_loss[e] >= report.epoch_loss[e - 1];
  EXPECT_LE(non_improving, 3u);
  EXPECT_LT(report.epoch_loss.back(), report.epoch_loss.front());
  // The loss rewards a margin over negatives rather than collapse onto the centroid,
  // so the spread shrinks substantially but not arbitrarily.
  EXPECT_LT(spread(), 0.75 * initial);
}

TEST(CoTraining, DistillationIsLocalAndLeavesOtherLayersAlone) {
  auto sys = fixture::make_small_system();
  CommMeter meter;
  train_ce(sys.devices, sys.split.shared.ids(), quick_config(), meter);
  const auto before = sys.devices;
  const auto ce_bytes = meter.bytes(Phase::kCeTraining);
  auto cfg = quick_config();
  cfg.co_epochs = 10;
  const auto report = train_co_local(sys.devices[1], sys.split.shared.ids(), cfg, meter);
  EXPECT_LT(report.final_loss, report.initial_loss);
  EXPECT_EQ(report.samples, sys.split.shared.size());
  EXPECT_EQ(meter.bytes(Phase::kCoTraining), 0u);
  EXPECT_EQ(meter.bytes(Phase::kCeTraining), ce_bytes);
  EXPECT_TRUE(same_parameters(before[1].ce, sys.devices[1].ce));
  EXPECT_TRUE(same_parameters(before[1].tail, sys.devices[1].tail));
  EXPECT_FALSE(same_parameters(before[1].co, sys.devices[1].co));
}

TEST(CoTraining, ReproducibleUnderSeed) {
  auto a = fixture::make_small_system();
  auto b = fixture::make_small_system();
  CommMeter m;
  train_co_local(a.devices[0], a.split.shared.ids(), quick_config(), m);
  train_co_local(b.devices[0], b.split.shared.ids(), quick_config(), m);
  EXPECT_TRUE(same_parameters(a.devices[0].co, b.devices[0].co));
}

TEST(Inference, BytesPerSample) {
  EXPECT_EQ(inference_bytes_per_sample(3, 256, 10), 2128u);
  EXPECT_EQ(inference_bytes_per_sample(2, 256, 10), 1064u);
  EXPECT_EQ(inference_bytes_per_sample(1, 256, 10), 0u);
  EXPECT_EQ(ce_bytes_per_epoch(3, 10000, 256), 40960000u);

  auto sys = fixture::make_small_system();
  const auto ids = sys.task.test.ids();
  CommMeter meter;
  const auto result = federated_infer(1, ids, sys.devices, meter);
  const auto arch = fixture::small_arch();
  EXPECT_EQ(result.bytes, ids.size() * inference_bytes_per_sample(3, arch.embed_dim, 4));
  EXPECT_EQ(meter.bytes(Phase::kInference), result.bytes);
  ASSERT_EQ(result.logits.size(), 3u);
  // Device 2's logits are its CO applied to the origin's embeddings.
  const Matrix z = zoo::embed(sys.devices[1], sys.devices[1].features(ids));
  EXPECT_TRUE(bit_equal(result.logits[2], zoo::co_predict(sys.devices[2], z)));
  for (const auto &rec : meter.trace()) {
    EXPECT_TRUE(rec.kind == MessageKind::kEmbedShare ? rec.sender == 1 : rec.receiver == 1);
  }
}

TEST(Inference, SingleDeviceIsSoloWithoutTraffic) {
  auto sys = fixture::make_small_system(1);
  CommMeter meter;
  const auto ids = sys.task.test.ids();
  const auto result = federated_infer(0, ids, sys.devices, meter);
  EXPECT_EQ(result.bytes, 0u);
  EXPECT_TRUE(meter.trace().empty());
  EXPECT_TRUE(
      bit_equal(result.logits[0], zoo::co_predict(sys.devices[0], zoo::embed(sys.devices[0], sys.devices[0].features(ids)))));
}

TEST(Consensus, IdealizedEmbeddingsAreTheDeviceMean) {
  auto sys = fixture::make_small_system();
  const auto ids = sys.task.test.ids();
  const Matrix mean_z = idealize_consensus(sys.devices, ids);
  std::vector<Matrix> z;
  for (const auto &d : sys.devices) z.push_back(zoo::embed(d, d.features(ids)));
  for (std::size_t i = 0; i < mean_z.size(); ++i) {
    const double expected = (static_cast<double>(z[0].data()[i]) + z[1].data()[i] + z[2].data()[i]) / 3.0;
    EXPECT_NEAR(mean_z.data()[i], expected, 1e-6);
  }
}

TEST(OodExclusion, FiltersToSeenLabels) {
  auto sys = fixture::make_small_system();
  const auto &labels = sys.split.shared_oracle_labels;
  auto &d = sys.devices[0];
  d.local = data::Dataset(std::vector<data::SampleId>{0, 1, 2, 3}, std::vector<int>{0, 1, 2, 3}, 4);
  EXPECT_EQ(exclude_ood_for_co(d, labels).size(), labels.size());
  d.local = data::Dataset(std::vector<data::SampleId>{0, 1}, std::vector<int>{2, 2}, 4);
  const auto rows = exclude_ood_for_co(d, labels);
  EXPECT_FALSE(rows.empty());
  for (std::size_t r : rows) EXPECT_EQ(labels[r], 2);
  const std::vector<int> none(labels.size(), 0);
  try {
    exclude_ood_for_co(d, none);
    FAIL() << "expected InvalidConfig";
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidConfig);
  }
}

TEST(Meter, TraceIsOrderedAndPrintable) {
  CommMeter meter;
  meter.record(Phase::kCeTraining, Message(MessageKind::kGradDown, 0, 2, 1, Matrix(1, 4), 4));
  meter.record(Phase::kCeTraining, Message(MessageKind::kEmbedUp, 2, 0, 1, Matrix(1, 4), 4));
  meter.record(Phase::kCeTraining, Message(MessageKind::kEmbedUp, 1, 0, 0, Matrix(2, 4), 4));
  const auto trace = meter.trace();
  ASSERT_EQ(trace.size(), 3u);
  EXPECT_EQ(trace[0].round, 0u);
  EXPECT_EQ(trace[1].kind, MessageKind::kEmbedUp);
  std::ostringstream out;
  meter.write_trace(out);
  EXPECT_EQ(out.str(), "0 EmbedUp 1 0 32\n1 EmbedUp 2 0 16\n1 GradDown 0 2 16\n");
}

TEST(FederationConfig, RejectsDegenerateSettings) {
  FederationConfig cfg;
  EXPECT_THROW(cfg.validate(1), Error);
  cfg.aggregator = AggregatorPolicy::kFixed;
  cfg.fixed_aggregator = 3;
  EXPECT_THROW(cfg.validate(3), Error);
  cfg.fixed_aggregator = 0;
  cfg.ce_batch = 1;
  EXPECT_THROW(cfg.validate(3), Error);
}

}  // namespace
}  // namespace fedinfer::fed
