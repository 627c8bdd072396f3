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

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <memory>
#include <set>

#include "fedinfer/datakit.hpp"
#include "fedinfer/losses.hpp"
#include "fedinfer/nn.hpp"

namespace fedinfer::data {
namespace {

Dataset labelled_pool(std::size_t per_class, std::size_t classes) {
  std::vector<SampleId> ids;
  std::vector<int> labels;
  for (std::size_t i = 0; i < per_class * classes; ++i) {
    ids.push_back(static_cast<SampleId>(1000 + i));
    labels.push_back(static_cast<int>(i % classes));
  }
  return Dataset(ids, labels, classes);
}

ErrorCode code_of(const std::function<void()> &fn) {
  try {
    fn();
  } catch (const Error &e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kInvalidInput;
}

TEST(Dataset, Invariants) {
  EXPECT_EQ(code_of([] { Dataset({1, 1}, std::vector<int>{0, 0}, 2); }), ErrorCode::kInvalidInput);
  EXPECT_EQ(code_of([] { Dataset({1, 2}, std::vector<int>{0, 2}, 2); }), ErrorCode::kInvalidLabel);
  const Dataset unlabeled({1, 2}, std::nullopt, 2);
  EXPECT_EQ(code_of([&] { unlabeled.labels(); }), ErrorCode::kLabelUnavailable);
}

TEST(FeatureTable, LookupByIdInRequestOrder) {
  FeatureTable t({7, 3}, Matrix{{1, 1}, {3, 3}});
  const std::vector<SampleId> ids{3, 7, 3};
  EXPECT_EQ(t.lookup(ids), (Matrix{{3, 3}, {1, 1}, {3, 3}}));
  const std::vector<SampleId> missing{4};
  EXPECT_THROW(t.lookup(missing), Error);
}

TEST(Holdout, SplitSizesDisjointAndUnlabeled) {
  const Dataset pool = labelled_pool(100, 10);
  const auto split = holdout_shared(pool, 0.2, 5);
  EXPECT_EQ(split.local_pool.size(), 800u);
  EXPECT_EQ(split.shared.size(), 200u);
  EXPECT_FALSE(split.shared.has_labels());
  EXPECT_EQ(code_of([&] { split.shared.labels(); }), ErrorCode::kLabelUnavailable);
  EXPECT_EQ(split.shared_oracle_labels.size(), 200u);
  std::set<SampleId> local(split.local_pool.ids().begin(), split.local_pool.ids().end());
  for (SampleId id : split.shared.ids()) EXPECT_EQ(local.count(id), 0u);

  const auto again = holdout_shared(pool, 0.2, 5);
  EXPECT_EQ(again.shared.ids(), split.shared.ids());
  EXPECT_NE(holdout_shared(pool, 0.2, 6).shared.ids(), split.shared.ids());
  EXPECT_EQ(code_of([&] { holdout_shared(pool, 1.0, 0); }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(code_of([&] { holdout_shared(pool, 0.0, 0); }), ErrorCode::kInvalidConfig);
}

TEST(LargestRemainder, SumsAndBreaksTiesLow) {
  const std::vector<double> thirds{1, 1, 1};
  EXPECT_EQ(largest_remainder(thirds, 10), (std::vector<std::size_t>{4, 3, 3}));
  const std::vector<double> skew{0.9, 0.1};
  EXPECT_EQ(largest_remainder(skew, 45), (std::vector<std::size_t>{41, 4}));
  const std::vector<double> w{0.5, 0.25, 0.25};
  // 3.5, 1.75, 1.75: floors 3, 1, 1 and the two .75 remainders win.
  EXPECT_EQ(largest_remainder(w, 7), (std::vector<std::size_t>{3, 2, 2}));
  const std::vector<double> halves{1, 1};
  EXPECT_EQ(largest_remainder(halves, 3), (std::vector<std::size_t>{2, 1}));
}

TEST(ManualShares, ColumnsSumToOne) {
  for (auto s : {PartitionScheme::kMild, PartitionScheme::kModerate, PartitionScheme::kSkewed,
                 PartitionScheme::kDisjoint}) {
    const auto shares = manual_shares(s, 3, 10);
    for (std::size_t c = 0; c < 10; ++c) {
      EXPECT_NEAR(shares[0][c] + shares[1][c] + shares[2][c], 1.0, 1e-12) << to_string(s);
    }
  }
  EXPECT_EQ(code_of([] { manual_shares(PartitionScheme::kMild, 4, 10); }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(code_of([] { manual_shares(PartitionScheme::kDirichlet, 3, 10); }), ErrorCode::kInvalidConfig);
}

TEST(PartitionManual, DisjointBlocks) {
  const auto part = partition_manual(labelled_pool(40, 10), PartitionScheme::kDisjoint, 3, 1);
  EXPECT_EQ(part.devices[0].label_set(), (std::set<int>{0, 1, 2, 3}));
  EXPECT_EQ(part.devices[1].label_set(), (std::set<int>{4, 5, 6}));
  EXPECT_EQ(part.devices[2].label_set(), (std::set<int>{7, 8, 9}));
}

TEST(PartitionManual, MildMissesOwnLabel) {
  const auto part = partition_manual(labelled_pool(40, 10), PartitionScheme::kMild, 3, 1);
  for (int d = 0; d < 3; ++d) {
    const auto labels = part.devices[static_cast<std::size_t>(d)].label_set();
    EXPECT_EQ(labels.size(), 9u);
    EXPECT_EQ(labels.count(d), 0u);
  }
}

TEST(PartitionManual, ModerateAndSkewedFollowMatrices) {
  const auto moderate = partition_manual(labelled_pool(40, 10), PartitionScheme::kModerate, 3, 2);
  for (std::size_t c = 0; c < 10; ++c) {
    for (std::size_t d = 0; d < 3; ++d) {
      const bool holder = d == c % 3 || d == (c + 1) % 3;
      EXPECT_EQ(moderate.spec.counts[d][c], holder ? 20u : 0u);
    }
  }
  const auto skewed = partition_manual(labelled_pool(40, 10), PartitionScheme::kSkewed, 3, 2);
  for (std::size_t c = 0; c < 6; ++c) {
    EXPECT_EQ(skewed.spec.counts[0][c], 36u);
    EXPECT_EQ(skewed.spec.counts[c % 2 + 1][c], 4u);
  }
  for (std::size_t c = 6; c < 10; ++c) EXPECT_EQ(skewed.spec.counts[1][c], 13u);
}

TEST(Partition, DisjointAndCoveringAcrossSeeds) {
  const Dataset pool = labelled_pool(30, 10);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<Partition> parts;
    for (auto s : {PartitionScheme::kMild, PartitionScheme::kModerate, PartitionScheme::kSkewed,
                   PartitionScheme::kDisjoint}) {
      parts.push_back(partition_manual(pool, s, 3, seed));
    }
    parts.push_back(partition_dirichlet(pool, 0.1, 3, seed));
    parts.push_back(partition_dirichlet(pool, 0.5, 3, seed));
    for (const auto &part : parts) {
      std::set<SampleId> seen;
      std::set<int> labels;
      std::size_t total = 0;
      for (const auto &dev : part.devices) {
        EXPECT_FALSE(dev.empty());
        for (SampleId id : dev.ids()) EXPECT_TRUE(seen.insert(id).second) << "id in two devices";
        total += dev.size();
        const auto ls = dev.label_set();
        labels.insert(ls.begin(), ls.end());
      }
      EXPECT_EQ(total, pool.size());
      EXPECT_EQ(labels.size(), 10u);
    }
  }
}

TEST(PartitionDirichlet, NearUniformForHugeAlpha) {
  const auto part = partition_dirichlet(labelled_pool(1000, 10), 1e6, 3, 3);
  for (std::size_t c = 0; c < 10; ++c) {
    for (std::size_t d = 0; d < 3; ++d) {
      EXPECT_NEAR(static_cast<double>(part.spec.counts[d][c]) / 1000.0, 1.0 / 3.0, 0.05);
    }
  }
}

double mean_max_class_share(const Partition &part) {
  double total = 0;
  for (const auto &dev : part.devices) {
    const auto counts = dev.class_counts();
    total += static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(dev.size());
  }
  return total / static_cast<double>(part.devices.size());
}

TEST(PartitionDirichlet, SmallerAlphaIsMoreSkewed) {
  const Dataset pool = labelled_pool(100, 10);
  double skew_small = 0, skew_large = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    skew_small += mean_max_class_share(partition_dirichlet(pool, 0.1, 3, seed));
    skew_large += mean_max_class_share(partition_dirichlet(pool, 0.5, 3, seed));
  }
  EXPECT_GT(skew_small, skew_large);
}

TEST(PartitionDirichlet, FixedSeedCountsSnapshot) {
  const auto part = partition_dirichlet(labelled_pool(20, 4), 0.5, 3, 42);
  EXPECT_EQ(part.spec.counts, (std::vector<std::vector<std::size_t>>{{3, 5, 4, 12}, {17, 13, 15, 2}, {0, 2, 1, 6}}));
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(part.spec.counts[0][c] + part.spec.counts[1][c] + part.spec.counts[2][c], 20u);
  }
  EXPECT_EQ(part.devices[2].size(), 9u);
}

TEST(PartitionDirichlet, FailsWhenDevicesCannotAllBeFilled) {
  // Two samples can never cover three devices.
  EXPECT_EQ(code_of([] { partition_dirichlet(labelled_pool(1, 2), 0.5, 3, 0); }), ErrorCode::kPartitionFailed);
  EXPECT_EQ(code_of([] { partition_dirichlet(labelled_pool(5, 2), 0.0, 3, 0); }), ErrorCode::kInvalidConfig);
}

TEST(Synthetic, BalancedAndDeterministic) {
  SyntheticTaskConfig cfg{.train_per_class = 30, .test_per_class = 7, .seed = 9};
  const auto a = synth_generate(cfg);
  const auto b = synth_generate(cfg);
  EXPECT_EQ(a.inputs.features(), b.inputs.features());
  for (std::size_t n : a.train.class_counts()) EXPECT_EQ(n, 30u);
  for (std::size_t n : a.test.class_counts()) EXPECT_EQ(n, 7u);
  EXPECT_EQ(a.inputs.size(), 370u);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = i + 1; j < 10; ++j) EXPECT_GT(l2_distance(a.class_means.row(i), a.class_means.row(j)), 0);
  }
  cfg.seed = 10;
  EXPECT_NE(synth_generate(cfg).inputs.features(), a.inputs.features());
}

TEST(Synthetic, WideSeparationIsLinearlySeparable) {
  const auto task = synth_generate({.separation = 10.0, .train_per_class = 100, .test_per_class = 50, .seed = 1});
  Rng rng(2);
  nn::Linear probe(64, 10, rng);
  nn::Adam adam(nn::AdamConfig{.learning_rate = 1e-2, .weight_decay = 0.0});
  const Matrix x = task.inputs.lookup(task.train.ids());
  for (int epoch = 0; epoch < 100; ++epoch) {
    probe.zero_grad();
    const auto loss = losses::cross_entropy(probe.forward(x, nn::Mode::kTrain), task.train.labels());
    probe.backward(loss.grad);
    adam.step(probe, epoch / 100.0);
  }
  const Matrix logits = probe.predict(task.inputs.lookup(task.test.ids()));
  std::size_t correct = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (static_cast<int>(argmax(logits.row(r))) == task.test.labels()[r]) ++correct;
  }
  EXPECT_GT(static_cast<double>(correct) / logits.rows(), 0.99);
}

FeatureFile sample_file(bool labels) {
  FeatureFile f;
  f.features = Matrix{{1.5f, -2}, {0, 3.25f}, {-0.0f, 1e-30f}};
  f.ids = {10, 20, 30};
  if (labels) f.labels = std::vector<std::uint32_t>{0, 1, 9};
  return f;
}

TEST(FeatureFile, HeaderLayout) {
  const std::string bytes = encode_features(sample_file(true));
  ASSERT_EQ(bytes.size(), 24u + 3 * 2 * 4 + 3 * 4 + 3 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "CEFI");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 3);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 2);
  // First float 1.5f = 0x3fc00000, little-endian.
  EXPECT_EQ(static_cast<unsigned char>(bytes[24]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(bytes[26]), 0xc0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[27]), 0x3f);
  // First id after the 24 float bytes.
  EXPECT_EQ(static_cast<unsigned char>(bytes[48]), 10);
  EXPECT_EQ(static_cast<unsigned char>(encode_features(sample_file(false))[7]), 0);
}

TEST(FeatureFile, RoundTripIsBitExact) {
  for (bool labels : {false, true}) {
    const FeatureFile f = sample_file(labels);
    const FeatureFile g = decode_features(encode_features(f));
    EXPECT_EQ(std::memcmp(f.features.data(), g.features.data(), f.features.size() * 4), 0);
    EXPECT_EQ(g.features.rows(), 3u);
    EXPECT_EQ(g.ids, f.ids);
    EXPECT_EQ(g.labels, f.labels);
  }
}

std::uint64_t format_error_offset(std::string bytes) {
  try {
    decode_features(bytes);
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::kFormatError);
    return e.offset().value_or(~0ull);
  }
  ADD_FAILURE() << "decoded corrupt bytes";
  return ~0ull;
}

TEST(FeatureFile, CorruptionReportsByteOffset) {
  const std::string good = encode_features(sample_file(true));
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_EQ(format_error_offset(bad), 0u);
  bad = good;
  bad[4] = 2;
  EXPECT_EQ(format_error_offset(bad), 4u);
  bad = good;
  bad[6] = 1;
  EXPECT_EQ(format_error_offset(bad), 6u);
  bad = good;
  bad[7] = 4;
  EXPECT_EQ(format_error_offset(bad), 7u);
  EXPECT_EQ(format_error_offset(good.substr(0, 10)), 8u);
  EXPECT_EQ(format_error_offset(good.substr(0, 30)), 24u);
  EXPECT_EQ(format_error_offset(good.substr(0, 50)), 48u);
  EXPECT_EQ(format_error_offset(good.substr(0, good.size() - 1)), 60u);
  EXPECT_EQ(format_error_offset(good + "x"), static_cast<std::uint64_t>(good.size()));
  EXPECT_EQ(format_error_offset(""), 0u);
}

TEST(FeatureFile, LargeFileRoundTrip) {
  const std::size_t rows = 100000, cols = 768;
  FeatureFile f;
  f.features = Matrix(rows, cols);
  Rng rng(3);
  for (float &v : f.features.values()) v = static_cast<float>(rng.normal());
  f.ids.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) f.ids[i] = static_cast<SampleId>(i * 3);
  const auto path = std::filesystem::temp_directory_path() / "fedinfer_large.cefi";
  write_features(path, f);
  EXPECT_EQ(std::filesystem::file_size(path), 24 + rows * cols * 4 + rows * 4);
  const FeatureFile g = read_features(path);
  std::filesystem::remove(path);
  EXPECT_TRUE(g.features == f.features);
  EXPECT_EQ(g.ids, f.ids);
  EXPECT_FALSE(g.labels.has_value());
}

TEST(FeatureFile, MissingFileIsIoError) {
  EXPECT_EQ(code_of([] { read_features("/nonexistent/dir/x.cefi"); }), ErrorCode::kIoError);
}

}  // namespace
}  // namespace fedinfer::data
