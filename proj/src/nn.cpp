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

#include "fedinfer/nn.hpp"

#include <cmath>
#include <numbers>

namespace fedinfer::nn {

namespace {

[[noreturn]] void no_forward(const char *layer) {
  throw Error(ErrorCode::kProtocolError, std::string(layer) + ": backward called without a cached forward");
}

std::string join(const std::string &prefix, const std::string &name) {
  return prefix.empty() ? name : prefix + "." + name;
}

void add_in_place(Matrix &dst, const Matrix &src) {
  require_same_shape(dst, src, "gradient accumulation");
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

}  // namespace

void Layer::for_each_parameter(const ConstParameterVisitor &fn) const {
  // Walking does not mutate; the non-const visitor is reused for traversal only.
  const_cast<Layer *>(this)->visit_parameters(
      "", [&fn](const std::string &name, Parameter &p, bool) { fn(name, p); });
}

void Layer::zero_grad() {
  visit_parameters("", [](const std::string &, Parameter &p, bool) { p.grad.fill(0.0f); });
}

std::size_t Layer::parameter_count() const {
  std::size_t n = 0;
  for_each_parameter([&n](const std::string &, const Parameter &p) { n += p.value.size(); });
  return n;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::size_t in, std::size_t out, Rng &init) {
  if (in == 0 || out == 0) throw Error(ErrorCode::kShapeError, "Linear: zero-sized layer");
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  weight_.value = Matrix(in, out);
  for (float &w : weight_.value.values()) w = static_cast<float>(init.uniform(-bound, bound));
  weight_.grad = Matrix(in, out);
  bias_.value = Matrix(1, out);
  bias_.grad = Matrix(1, out);
  bias_.decay = false;
}

Linear::Linear(Matrix weight, Matrix bias) {
  if (bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw Error(ErrorCode::kShapeError, "Linear: bias must be 1 x out");
  }
  weight_.grad = Matrix(weight.rows(), weight.cols());
  weight_.value = std::move(weight);
  bias_.grad = Matrix(1, bias.cols());
  bias_.value = std::move(bias);
  bias_.decay = false;
}

Matrix Linear::predict(const Matrix &x) const {
  if (x.cols() != in_features()) {
    throw Error(ErrorCode::kShapeError, "Linear: input has " + std::to_string(x.cols()) + " features, expected " +
                                            std::to_string(in_features()));
  }
  Matrix y = matmul(x, weight_.value);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias_.value(0, c);
  }
  return y;
}

Matrix Linear::forward(const Matrix &x, Mode) {
  Matrix y = predict(x);
  input_ = x;
  return y;
}

Matrix Linear::backward(const Matrix &grad_out) {
  if (!input_) no_forward("Linear");
  if (grad_out.rows() != input_->rows() || grad_out.cols() != out_features()) {
    throw Error(ErrorCode::kShapeError, "Linear: upstream gradient shape mismatch");
  }
  if (!frozen_) {
    add_in_place(weight_.grad, matmul_tn(*input_, grad_out));
    std::vector<double> colsum(grad_out.cols(), 0.0);
    for (std::size_t r = 0; r < grad_out.rows(); ++r) {
      auto row = grad_out.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) colsum[c] += row[c];
    }
    for (std::size_t c = 0; c < colsum.size(); ++c) bias_.grad(0, c) += static_cast<float>(colsum[c]);
  }
  input_.reset();
  return matmul_nt(grad_out, weight_.value);
}

void Linear::visit_parameters(const std::string &prefix, const ParameterVisitor &fn) {
  fn(join(prefix, "weight"), weight_, frozen_);
  fn(join(prefix, "bias"), bias_, frozen_);
}

// ------------------------------------------------------------------ ReLU

Matrix Relu::predict(const Matrix &x) const {
  Matrix y = x;
  for (float &v : y.values()) v = v > 0.0f ? v : 0.0f;
  return y;
}

Matrix Relu::forward(const Matrix &x, Mode) {
  Matrix y = predict(x);
  output_ = y;
  return y;
}

Matrix Relu::backward(const Matrix &grad_out) {
  if (!output_) no_forward("Relu");
  require_same_shape(grad_out, *output_, "Relu backward");
  Matrix g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(output_->data()[i] > 0.0f)) g.data()[i] = 0.0f;
  }
  output_.reset();
  return g;
}

// --------------------------------------------------------------- Dropout

Dropout::Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error(ErrorCode::kInvalidConfig, "Dropout: rate must be in [0, 1)");
}

Matrix Dropout::forward(const Matrix &x, Mode mode) {
  cached_ = true;
  if (mode == Mode::kEval || rate_ == 0.0) {
    mask_.reset();
    return x;
  }
  const float scale = static_cast<float>(1.0 / (1.0 - rate_));
  Matrix mask(x.rows(), x.cols());
  Matrix y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float keep = rng_.uniform() >= rate_ ? scale : 0.0f;
    mask.data()[i] = keep;
    y.data()[i] *= keep;
  }
  mask_ = std::move(mask);
  return y;
}

Matrix Dropout::backward(const Matrix &grad_out) {
  if (!cached_) no_forward("Dropout");
  cached_ = false;
  if (!mask_) return grad_out;
  require_same_shape(grad_out, *mask_, "Dropout backward");
  Matrix g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] *= mask_->data()[i];
  return g;
}

// ------------------------------------------------------------- LayerNorm

LayerNorm::LayerNorm(std::size_t dim) {
  gain_.value = Matrix(1, dim, 1.0f);
  gain_.grad = Matrix(1, dim);
  gain_.decay = false;
  shift_.value = Matrix(1, dim);
  shift_.grad = Matrix(1, dim);
  shift_.decay = false;
}

Matrix LayerNorm::normalize(const Matrix &x, std::vector<double> *inv_std, Matrix *x_hat) const {
  const std::size_t d = gain_.value.cols();
  if (x.cols() != d) throw Error(ErrorCode::kShapeError, "LayerNorm: feature dimension mismatch");
  Matrix y(x.rows(), d);
  if (inv_std) inv_std->assign(x.rows(), 0.0);
  if (x_hat) *x_hat = Matrix(x.rows(), d);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double mu = 0.0;
    for (float v : in) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (float v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kEpsilon);
    if (inv_std) (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (in[c] - mu) * is;
      if (x_hat) (*x_hat)(r, c) = static_cast<float>(h);
      y(r, c) = static_cast<float>(h * gain_.value(0, c) + shift_.value(0, c));
    }
  }
  return y;
}

Matrix LayerNorm::predict(const Matrix &x) const { return normalize(x, nullptr, nullptr); }

Matrix LayerNorm::forward(const Matrix &x, Mode) {
  Matrix x_hat;
  Matrix y = normalize(x, &inv_std_, &x_hat);
  x_hat_ = std::move(x_hat);
  return y;
}

Matrix LayerNorm::backward(const Matrix &grad_out) {
  if (!x_hat_) no_forward("LayerNorm");
  require_same_shape(grad_out, *x_hat_, "LayerNorm backward");
  const std::size_t n = grad_out.rows(), d = grad_out.cols();
  Matrix dx(n, d);
  std::vector<double> dgain(d, 0.0), dshift(d, 0.0), dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    auto g = grad_out.row(r);
    auto h = x_hat_->row(r);
    double sum_dxhat = 0.0, sum_dxhat_h = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dgain[c] += static_cast<double>(g[c]) * h[c];
      dshift[c] += g[c];
      dxhat[c] = static_cast<double>(g[c]) * gain_.value(0, c);
      sum_dxhat += dxhat[c];
      sum_dxhat_h += dxhat[c] * h[c];
    }
    const double scale = inv_std_[r] / static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) {
      dx(r, c) = static_cast<float>(scale * (static_cast<double>(d) * dxhat[c] - sum_dxhat - h[c] * sum_dxhat_h));
    }
  }
  if (!frozen_) {
    for (std::size_t c = 0; c < d; ++c) {
      gain_.grad(0, c) += static_cast<float>(dgain[c]);
      shift_.grad(0, c) += static_cast<float>(dshift[c]);
    }
  }
  x_hat_.reset();
  return dx;
}

void LayerNorm::visit_parameters(const std::string &prefix, const ParameterVisitor &fn) {
  fn(join(prefix, "gain"), gain_, frozen_);
  fn(join(prefix, "shift"), shift_, frozen_);
}

// ------------------------------------------------------------ Sequential

Sequential::Sequential(const Sequential &other) : Layer(other), cached_(false) {
  layers_.reserve(other.layers_.size());
  for (const auto &[name, layer] : other.layers_) layers_.emplace_back(name, layer->clone());
}

Sequential &Sequential::operator=(const Sequential &other) {
  if (this != &other) {
    Sequential copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Sequential &Sequential::add(std::string name, std::unique_ptr<Layer> layer) {
  for (const auto &entry : layers_) {
    if (entry.first == name) throw Error(ErrorCode::kInvalidConfig, "Sequential: duplicate layer name " + name);
  }
  layers_.emplace_back(std::move(name), std::move(layer));
  return *this;
}

Matrix Sequential::forward(const Matrix &x, Mode mode) {
  Matrix h = x;
  for (auto &entry : layers_) h = entry.second->forward(h, mode);
  cached_ = true;
  return h;
}

Matrix Sequential::backward(const Matrix &grad_out) {
  if (!cached_) no_forward("Sequential");
  cached_ = false;
  Matrix g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = it->second->backward(g);
  return g;
}

Matrix Sequential::predict(const Matrix &x) const {
  Matrix h = x;
  for (const auto &entry : layers_) h = entry.second->predict(h);
  return h;
}

void Sequential::visit_parameters(const std::string &prefix, const ParameterVisitor &fn) {
  for (auto &entry : layers_) entry.second->visit_parameters(join(prefix, entry.first), fn);
}

void Sequential::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto &entry : layers_) entry.second->set_frozen(frozen);
}

Layer &Sequential::at(const std::string &name) {
  for (auto &entry : layers_) {
    if (entry.first == name) return *entry.second;
  }
  throw Error(ErrorCode::kInvalidInput, "Sequential: no layer named " + name);
}

const Layer &Sequential::at(const std::string &name) const {
  return const_cast<Sequential *>(this)->at(name);
}

// -------------------------------------------------------------- Residual

Matrix Residual::forward(const Matrix &x, Mode mode) {
  Matrix a = skip_.forward(x, mode);
  Matrix b = body_.forward(x, mode);
  add_in_place(a, b);
  return a;
}

Matrix Residual::backward(const Matrix &grad_out) {
  Matrix gx = skip_.backward(grad_out);
  add_in_place(gx, body_.backward(grad_out));
  return gx;
}

Matrix Residual::predict(const Matrix &x) const {
  Matrix a = skip_.predict(x);
  add_in_place(a, body_.predict(x));
  return a;
}

void Residual::visit_parameters(const std::string &prefix, const ParameterVisitor &fn) {
  skip_.visit_parameters(join(prefix, "skip"), fn);
  body_.visit_parameters(join(prefix, "body"), fn);
}

void Residual::set_frozen(bool frozen) {
  frozen_ = frozen;
  skip_.set_frozen(frozen);
  body_.set_frozen(frozen);
}

// ------------------------------------------------------------------ Adam

Adam::Adam(AdamConfig cfg) : cfg_(cfg) {
  if (!(cfg_.learning_rate > 0.0) || cfg_.min_learning_rate < 0.0 || cfg_.min_learning_rate > cfg_.learning_rate ||
      cfg_.weight_decay < 0.0) {
    throw Error(ErrorCode::kInvalidConfig, "Adam: invalid learning-rate or decay settings");
  }
}

double Adam::learning_rate(double progress) const {
  const double t = std::clamp(progress, 0.0, 1.0);
  return cfg_.min_learning_rate +
         0.5 * (cfg_.learning_rate - cfg_.min_learning_rate) * (1.0 + std::cos(std::numbers::pi * t));
}

void Adam::step(Layer &stack, double progress) {
  ++steps_;
  const double lr = learning_rate(progress);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  std::size_t index = 0;
  stack.visit_parameters("", [&](const std::string &, Parameter &p, bool frozen) {
    if (index == moments_.size()) {
      moments_.push_back({std::vector<double>(p.value.size(), 0.0), std::vector<double>(p.value.size(), 0.0)});
    }
    Moments &mo = moments_[index++];
    if (mo.m.size() != p.value.size()) throw Error(ErrorCode::kShapeError, "Adam: parameter layout changed");
    if (frozen) return;
    const double wd = p.decay ? cfg_.weight_decay : 0.0;
    float *theta = p.value.data();
    const float *grad = p.grad.data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(grad[i]) + wd * static_cast<double>(theta[i]);
      mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * g;
      mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double update = lr * (mo.m[i] / bc1) / (std::sqrt(mo.v[i] / bc2) + cfg_.epsilon);
      theta[i] = static_cast<float>(static_cast<double>(theta[i]) - update);
    }
  });
}

// ------------------------------------------------------------- Training

void TrainLoopConfig::validate() const {
  if (batch_size == 0) throw Error(ErrorCode::kInvalidConfig, "batch_size must be >= 1");
  if (early_stop_patience < 1) throw Error(ErrorCode::kInvalidConfig, "early_stop_patience must be >= 1");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw Error(ErrorCode::kInvalidConfig, "validation_fraction must be in (0, 1)");
  }
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng &rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

std::vector<std::pair<std::string, Matrix>> snapshot_parameters(const Layer &stack) {
  std::vector<std::pair<std::string, Matrix>> out;
  stack.for_each_parameter([&out](const std::string &name, const Parameter &p) { out.emplace_back(name, p.value); });
  return out;
}

void restore_parameters(Layer &stack, const std::vector<std::pair<std::string, Matrix>> &values) {
  std::size_t index = 0;
  stack.visit_parameters("", [&](const std::string &name, Parameter &p, bool) {
    if (index >= values.size() || values[index].first != name || !values[index].second.same_shape(p.value)) {
      throw Error(ErrorCode::kShapeError, "restore_parameters: layout mismatch at " + name);
    }
    p.value = values[index++].second;
  });
  if (index != values.size()) throw Error(ErrorCode::kShapeError, "restore_parameters: extra entries");
}

}  // namespace fedinfer::nn
