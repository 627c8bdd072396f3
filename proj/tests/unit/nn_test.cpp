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

#include <cmath>
#include <memory>
#include <random>
#include <string>

#include "fedinfer/nn.hpp"

namespace fedinfer::nn {
namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng &rng, double scale = 1.0) {
  Matrix m(r, c);
  for (float &x : m.values()) x = static_cast<float>(scale * rng.normal());
  return m;
}

// Scalar objective sum(y * probe) so that dL/dy = probe.
double weighted_sum(const Matrix &y, const Matrix &probe) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(y.data()[i]) * probe.data()[i];
  return s;
}

// Checks input and parameter gradients of a deterministic layer.
void check_layer_gradients(Layer &layer, const Matrix &x, double tol) {
  Rng rng(99);
  const Matrix probe = random_matrix(layer.predict(x).rows(), layer.predict(x).cols(), rng);
  layer.zero_grad();
  layer.forward(x, Mode::kTrain);
  const Matrix gx = layer.backward(probe);
  const auto fx = [&](const Matrix &in) { return weighted_sum(layer.predict(in), probe); };
  EXPECT_LT(grad_check(fx, x, gx, 1e-2).max_rel_error, tol) << "input gradient";

  layer.visit_parameters("", [&](const std::string &name, Parameter &p, bool) {
    const Matrix original = p.value;
    const auto fp = [&](const Matrix &v) {
      p.value = v;
      const double out = weighted_sum(layer.predict(x), probe);
      p.value = original;
      return out;
    };
    EXPECT_LT(grad_check(fp, original, p.grad, 1e-2).max_rel_error, tol) << name;
  });
}

TEST(Linear, ForwardIsAffine) {
  Linear lin(Matrix{{1, 2}, {3, 4}, {5, 6}}, Matrix{{0.5f, -1}});
  const Matrix y = lin.predict(Matrix{{1, 0, 1}});
  EXPECT_EQ(y, (Matrix{{6.5f, 7}}));
  EXPECT_THROW(lin.predict(Matrix(1, 2)), Error);
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  Rng rng(1);
  Linear lin(5, 4, rng);
  check_layer_gradients(lin, random_matrix(3, 5, rng), 1e-3);
}

TEST(Linear, InitBoundAndZeroBias) {
  Rng rng(2);
  Linear lin(64, 32, rng);
  const double bound = std::sqrt(6.0 / 64.0);
  for (float w : lin.weight().value.values()) EXPECT_LE(std::abs(w), bound);
  for (float b : lin.bias().value.values()) EXPECT_EQ(b, 0.0f);
  EXPECT_FALSE(lin.bias().decay);
  EXPECT_TRUE(lin.weight().decay);
}

TEST(Layer, BackwardWithoutForwardIsProtocolError) {
  Rng rng(3);
  Linear lin(2, 2, rng);
  try {
    lin.backward(Matrix(1, 2));
    FAIL();
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::kProtocolError);
  }
  lin.forward(Matrix(1, 2), Mode::kTrain);
  lin.backward(Matrix(1, 2));
  EXPECT_THROW(lin.backward(Matrix(1, 2)), Error);
}

TEST(Relu, ZeroesNegativesAndTheirGradient) {
  Relu relu;
  const Matrix y = relu.forward(Matrix{{-1, 2, 0}}, Mode::kTrain);
  EXPECT_EQ(y, (Matrix{{0, 2, 0}}));
  EXPECT_EQ(relu.backward(Matrix{{5, 5, 5}}), (Matrix{{0, 5, 0}}));
}

TEST(Dropout, EvalIsIdentityTrainScalesKept) {
  Dropout drop(0.3, 17);
  Rng rng(4);
  const Matrix x = random_matrix(20, 50, rng);
  EXPECT_EQ(drop.forward(x, Mode::kEval), x);
  drop.backward(x);
  const Matrix y = drop.forward(x, Mode::kTrain);
  const Matrix &mask = *drop.last_mask();
  std::size_t kept = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float m = mask.data()[i];
    ASSERT_TRUE(m == 0.0f || m == static_cast<float>(1.0 / 0.7));
    if (m != 0.0f) ++kept;
    EXPECT_EQ(y.data()[i], x.data()[i] * m);
  }
  EXPECT_NEAR(static_cast<double>(kept) / x.size(), 0.7, 0.05);
  const Matrix g = drop.backward(Matrix(20, 50, 1.0f));
  EXPECT_EQ(g, mask);
}

TEST(Dropout, SeededMaskSnapshot) {
  Dropout drop(0.5, 2024);
  drop.forward(Matrix(1, 12, 1.0f), Mode::kTrain);
  std::string bits;
  for (float m : drop.last_mask()->values()) bits += m == 0.0f ? '0' : '1';
  Dropout again(0.5, 2024);
  again.forward(Matrix(1, 12, 1.0f), Mode::kTrain);
  EXPECT_EQ(*again.last_mask(), *drop.last_mask());
  // Independent replay: keep iff the 53-bit uniform from mt19937_64 is >= p.
  std::mt19937_64 engine(2024);
  std::string replay;
  for (int i = 0; i < 12; ++i) replay += static_cast<double>(engine() >> 11) * 0x1.0p-53 >= 0.5 ? '1' : '0';
  EXPECT_EQ(bits, replay);
  EXPECT_EQ(bits, "110000110111");
}

TEST(Dropout, RejectsBadRate) {
  EXPECT_THROW(Dropout(1.0, 0), Error);
  EXPECT_THROW(Dropout(-0.1, 0), Error);
}

TEST(LayerNorm, NormalizesRows) {
  LayerNorm ln(4);
  const Matrix y = ln.predict(Matrix{{1, 2, 3, 4}, {10, 10, 10, 14}});
  for (std::size_t r = 0; r < 2; ++r) {
    double mu = 0, var = 0;
    for (float v : y.row(r)) mu += v;
    mu /= 4;
    for (float v : y.row(r)) var += (v - mu) * (v - mu);
    EXPECT_NEAR(mu, 0.0, 1e-6);
    EXPECT_NEAR(var / 4, 1.0, 1e-3);
  }
}

TEST(LayerNorm, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  LayerNorm ln(6);
  ln.visit_parameters("", [&](const std::string &, Parameter &p, bool) {
    for (float &v : p.value.values()) v += static_cast<float>(0.3 * rng.normal());
  });
  check_layer_gradients(ln, random_matrix(4, 6, rng, 2.0), 2e-3);
}

TEST(Residual, SumsBranchesAndBackpropagatesBoth) {
  Rng rng(6);
  Sequential skip;
  skip.add("proj", std::make_unique<Linear>(3, 4, rng));
  Sequential body;
  body.add("fc1", std::make_unique<Linear>(3, 5, rng)).add("act", std::make_unique<Relu>());
  body.add("fc2", std::make_unique<Linear>(5, 4, rng));
  Residual res(std::move(skip), std::move(body));
  const Matrix x = random_matrix(6, 3, rng);
  const Matrix y = res.predict(x);
  Matrix expect = res.skip().predict(x);
  const Matrix b = res.body().predict(x);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_FLOAT_EQ(y.data()[i], expect.data()[i] + b.data()[i]);
  check_layer_gradients(res, x, 2e-3);
}

TEST(Sequential, EmptyIsIdentityAndNamesAreDotted) {
  Sequential empty;
  const Matrix x{{1, 2}};
  EXPECT_EQ(empty.predict(x), x);
  Rng rng(7);
  Sequential s;
  s.add("fc", std::make_unique<Linear>(2, 2, rng)).add("norm", std::make_unique<LayerNorm>(2));
  std::vector<std::string> names;
  s.for_each_parameter([&](const std::string &n, const Parameter &) { names.push_back(n); });
  EXPECT_EQ(names, (std::vector<std::string>{"fc.weight", "fc.bias", "norm.gain", "norm.shift"}));
  EXPECT_EQ(s.parameter_count(), 4u + 2 + 2 + 2);
  EXPECT_THROW(s.add("fc", std::make_unique<Relu>()), Error);
  EXPECT_THROW(s.at("missing"), Error);
}

TEST(Sequential, CloneIsDeep) {
  Rng rng(8);
  Sequential s;
  s.add("fc", std::make_unique<Linear>(2, 2, rng));
  Sequential copy = s;
  static_cast<Linear &>(copy.at("fc")).weight().value(0, 0) += 1.0f;
  EXPECT_NE(static_cast<Linear &>(copy.at("fc")).weight().value, static_cast<Linear &>(s.at("fc")).weight().value);
}

TEST(Freeze, FrozenLayerKeepsGradientsButPassesInputGradient) {
  Rng rng(9);
  Sequential s;
  s.add("fc", std::make_unique<Linear>(3, 2, rng));
  s.set_frozen(true);
  s.zero_grad();
  s.forward(random_matrix(2, 3, rng), Mode::kTrain);
  const Matrix gx = s.backward(Matrix(2, 2, 1.0f));
  EXPECT_GT(frobenius_norm(gx), 0.0);
  EXPECT_EQ(frobenius_norm(static_cast<Linear &>(s.at("fc")).weight().grad), 0.0);

  const auto before = snapshot_parameters(s);
  static_cast<Linear &>(s.at("fc")).weight().grad.fill(1.0f);
  Adam adam;
  adam.step(s, 0.0);
  EXPECT_EQ(snapshot_parameters(s), before);
}

TEST(Adam, CosineScheduleEndpoints) {
  Adam adam;
  EXPECT_DOUBLE_EQ(adam.learning_rate(0.0), 1e-3);
  EXPECT_DOUBLE_EQ(adam.learning_rate(1.0), 1e-5);
  EXPECT_NEAR(adam.learning_rate(0.5), 0.5 * (1e-3 + 1e-5), 1e-15);
  EXPECT_THROW(Adam(AdamConfig{.learning_rate = -1.0}), Error);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // With bias correction the first update is lr * g / (|g| + eps).
  Linear lin(Matrix{{1.0f}}, Matrix{{0.0f}});
  lin.weight().grad(0, 0) = 0.25f;
  lin.bias().grad(0, 0) = -2.0f;
  Adam adam(AdamConfig{.weight_decay = 0.0});
  adam.step(lin, 0.0);
  EXPECT_NEAR(lin.weight().value(0, 0), 1.0 - 1e-3, 1e-7);
  EXPECT_NEAR(lin.bias().value(0, 0), 1e-3, 1e-7);
}

TEST(Adam, WeightDecaySkipsBias) {
  Linear lin(Matrix{{1.0f}}, Matrix{{1.0f}});
  Adam adam(AdamConfig{.weight_decay = 0.1});
  adam.step(lin, 0.0);
  EXPECT_LT(lin.weight().value(0, 0), 1.0f);
  EXPECT_EQ(lin.bias().value(0, 0), 1.0f);
}

TEST(Adam, MinimizesQuadratic) {
  Rng rng(10);
  Linear lin(4, 1, rng);
  Adam adam(AdamConfig{.learning_rate = 0.05, .min_learning_rate = 0.0, .weight_decay = 0.0});
  const Matrix x = random_matrix(32, 4, rng);
  Matrix target(32, 1);
  for (std::size_t r = 0; r < 32; ++r) target(r, 0) = x(r, 0) - 2 * x(r, 3) + 0.5f;
  double loss = 0;
  for (int it = 0; it < 600; ++it) {
    lin.zero_grad();
    Matrix y = lin.forward(x, Mode::kTrain);
    loss = 0;
    for (std::size_t r = 0; r < 32; ++r) {
      const double d = y(r, 0) - target(r, 0);
      loss += d * d / 32;
      y(r, 0) = static_cast<float>(2 * d / 32);
    }
    lin.backward(y);
    adam.step(lin, it / 600.0);
  }
  EXPECT_LT(loss, 1e-4);
}

TEST(Batches, CoverEveryIndexOnceAndKeepRemainder) {
  Rng rng(11);
  const auto batches = make_batches(10, 4, rng);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[2].size(), 2u);
  std::vector<int> seen(10, 0);
  for (const auto &b : batches) {
    for (std::size_t i : b) ++seen[i];
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(Snapshot, RestoreRoundTripsAndChecksLayout) {
  Rng rng(12);
  Sequential s;
  s.add("fc", std::make_unique<Linear>(2, 3, rng));
  const auto snap = snapshot_parameters(s);
  static_cast<Linear &>(s.at("fc")).weight().value.fill(9.0f);
  restore_parameters(s, snap);
  EXPECT_EQ(snapshot_parameters(s), snap);
  Sequential other;
  other.add("fc", std::make_unique<Linear>(3, 3, rng));
  EXPECT_THROW(restore_parameters(other, snap), Error);
}

TEST(TrainLoopConfig, Validation) {
  EXPECT_NO_THROW(TrainLoopConfig{}.validate());
  EXPECT_THROW(TrainLoopConfig{.batch_size = 0}.validate(), Error);
  EXPECT_THROW(TrainLoopConfig{.validation_fraction = 1.0}.validate(), Error);
}

}  // namespace
}  // namespace fedinfer::nn
