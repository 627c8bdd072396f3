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

#ifndef FEDINFER_NN_HPP_
#define FEDINFER_NN_HPP_

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedinfer/numerics.hpp"

namespace fedinfer::nn {

enum class Mode { kTrain, kEval };

enum class LayerKind { kLinear, kRelu, kDropout, kLayerNorm, kResidual, kSequential };

struct Parameter {
  Matrix value;
  Matrix grad;
  // Biases and normalization parameters are excluded from weight decay.
  bool decay = true;
};

using ParameterVisitor = std::function<void(const std::string &name, Parameter &param, bool frozen)>;
using ConstParameterVisitor = std::function<void(const std::string &name, const Parameter &param)>;

/**
 * A differentiable layer.
 *
 * forward() caches what backward() needs; backward() consumes that cache, so
 * each backward must be preceded by its own forward. predict() is the
 * eval-mode forward without caching and is safe to call concurrently.
 * Parameter gradients accumulate until zero_grad(); frozen layers never touch
 * their gradients but still propagate the input gradient.
 */
class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual Matrix forward(const Matrix &x, Mode mode) = 0;
  virtual Matrix backward(const Matrix &grad_out) = 0;
  virtual Matrix predict(const Matrix &x) const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  virtual void visit_parameters(const std::string &prefix, const ParameterVisitor &fn) { (void)prefix, (void)fn; }
  // Read-only walk over every parameter with its dotted name.
  void for_each_parameter(const ConstParameterVisitor &fn) const;

  virtual void set_frozen(bool frozen) { frozen_ = frozen; }
  bool frozen() const noexcept { return frozen_; }

  void zero_grad();
  std::size_t parameter_count() const;

 protected:
  Layer() = default;
  Layer(const Layer &) = default;
  Layer &operator=(const Layer &) = default;

  bool frozen_ = false;
};

// y = x W + b, with W stored in x out.
class Linear final : public Layer {
 public:
  // Kaiming-uniform fan-in init for the weight, zero bias.
  Linear(std::size_t in, std::size_t out, Rng &init);
  Linear(Matrix weight, Matrix bias);

  LayerKind kind() const override { return LayerKind::kLinear; }
  Matrix forward(const Matrix &x, Mode mode) override;
  Matrix backward(const Matrix &grad_out) override;
  Matrix predict(const Matrix &x) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }
  void visit_parameters(const std::string &prefix, const ParameterVisitor &fn) override;

  std::size_t in_features() const noexcept { return weight_.value.rows(); }
  std::size_t out_features() const noexcept { return weight_.value.cols(); }
  Parameter &weight() noexcept { return weight_; }
  Parameter &bias() noexcept { return bias_; }
  const Parameter &weight() const noexcept { return weight_; }
  const Parameter &bias() const noexcept { return bias_; }

 private:
  Parameter weight_;
  Parameter bias_;
  std::optional<Matrix> input_;
};

class Relu final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::kRelu; }
  Matrix forward(const Matrix &x, Mode mode) override;
  Matrix backward(const Matrix &grad_out) override;
  Matrix predict(const Matrix &x) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }

 private:
  std::optional<Matrix> output_;
};

/**
 * Inverted dropout. Each train-mode forward draws a fresh mask from the
 * layer's own seeded stream and scales kept units by 1/(1-p); eval mode is
 * the identity.
 */
class Dropout final : public Layer {
 public:
  Dropout(double rate, std::uint64_t seed);

  LayerKind kind() const override { return LayerKind::kDropout; }
  Matrix forward(const Matrix &x, Mode mode) override;
  Matrix backward(const Matrix &grad_out) override;
  Matrix predict(const Matrix &x) const override { return x; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dropout>(*this); }

  double rate() const noexcept { return rate_; }
  // Mask of the most recent train-mode forward, in {0, 1/(1-p)}.
  const std::optional<Matrix> &last_mask() const noexcept { return mask_; }

 private:
  double rate_;
  Rng rng_;
  std::optional<Matrix> mask_;
  bool cached_ = false;
};

class LayerNorm final : public Layer {
 public:
  static constexpr double kEpsilon = 1e-5;

  explicit LayerNorm(std::size_t dim);

  LayerKind kind() const override { return LayerKind::kLayerNorm; }
  Matrix forward(const Matrix &x, Mode mode) override;
  Matrix backward(const Matrix &grad_out) override;
  Matrix predict(const Matrix &x) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<LayerNorm>(*this); }
  void visit_parameters(const std::string &prefix, const ParameterVisitor &fn) override;

  Parameter &gain() noexcept { return gain_; }
  Parameter &shift() noexcept { return shift_; }

 private:
  Matrix normalize(const Matrix &x, std::vector<double> *inv_std, Matrix *x_hat) const;

  Parameter gain_;
  Parameter shift_;
  std::optional<Matrix> x_hat_;
  std::vector<double> inv_std_;
};

// Ordered container; the empty stack is the identity map.
class Sequential final : public Layer {
 public:
  Sequential() = default;
  Sequential(const Sequential &other);
  Sequential &operator=(const Sequential &other);
  Sequential(Sequential &&) noexcept = default;
  Sequential &operator=(Sequential &&) noexcept = default;

  Sequential &add(std::string name, std::unique_ptr<Layer> layer);

  LayerKind kind() const override { return LayerKind::kSequential; }
  Matrix forward(const Matrix &x, Mode mode) override;
  Matrix backward(const Matrix &grad_out) override;
  Matrix predict(const Matrix &x) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Sequential>(*this); }
  void visit_parameters(const std::string &prefix, const ParameterVisitor &fn) override;
  void set_frozen(bool frozen) override;

  std::size_t size() const noexcept { return layers_.size(); }
  Layer &at(std::size_t i) { return *layers_.at(i).second; }
  const Layer &at(std::size_t i) const { return *layers_.at(i).second; }
  Layer &at(const std::string &name);
  const Layer &at(const std::string &name) const;

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Layer>>> layers_;
  bool cached_ = false;
};

// y = skip(x) + body(x).
class Residual final : public Layer {
 public:
  Residual(Sequential skip, Sequential body) : skip_(std::move(skip)), body_(std::move(body)) {}

  LayerKind kind() const override { return LayerKind::kResidual; }
  Matrix forward(const Matrix &x, Mode mode) override;
  Matrix backward(const Matrix &grad_out) override;
  Matrix predict(const Matrix &x) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Residual>(*this); }
  void visit_parameters(const std::string &prefix, const ParameterVisitor &fn) override;
  void set_frozen(bool frozen) override;

  Sequential &skip() noexcept { return skip_; }
  Sequential &body() noexcept { return body_; }

 private:
  Sequential skip_;
  Sequential body_;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double min_learning_rate = 1e-5;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/**
 * Adam with L2-coupled weight decay and a cosine-annealed learning rate
 * running from learning_rate (progress 0) to min_learning_rate (progress 1).
 */
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {});

  const AdamConfig &config() const noexcept { return cfg_; }
  double learning_rate(double progress) const;
  void step(Layer &stack, double progress);
  std::int64_t steps() const noexcept { return steps_; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };

  AdamConfig cfg_;
  std::int64_t steps_ = 0;
  std::vector<Moments> moments_;
};

struct TrainLoopConfig {
  std::size_t batch_size = 64;
  std::size_t max_epochs = 20;
  std::size_t early_stop_patience = 5;
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

// Splits [0, n) into shuffled batches; a trailing partial batch is kept.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng &rng);

// Parameter values keyed by dotted name, in visitation order.
std::vector<std::pair<std::string, Matrix>> snapshot_parameters(const Layer &stack);
void restore_parameters(Layer &stack, const std::vector<std::pair<std::string, Matrix>> &values);

}  // namespace fedinfer::nn

#endif  // FEDINFER_NN_HPP_
