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

#include "fedinfer/model_zoo.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "fedinfer/losses.hpp"

namespace fedinfer::zoo {

void ArchConfig::validate() const {
  if (head_dim == 0 || tail_hidden == 0 || ce_hidden == 0 || co_hidden == 0 || embed_dim == 0) {
    throw Error(ErrorCode::kInvalidConfig, "architecture widths must be > 0");
  }
  for (double p : {tail_dropout, ce_dropout, co_dropout}) {
    if (!(p >= 0.0 && p < 1.0)) throw Error(ErrorCode::kInvalidConfig, "dropout rates must be in [0, 1)");
  }
}

// ------------------------------------------------------------------ Heads

HeadSource HeadSource::synthetic(std::shared_ptr<const data::FeatureTable> raw, std::size_t out_dim,
                                 std::uint64_t seed) {
  if (!raw || raw->dim() == 0 || out_dim == 0) throw Error(ErrorCode::kInvalidConfig, "synthetic head: bad shape");
  HeadSource h;
  h.kind_ = Kind::kSynthetic;
  h.feature_dim_ = out_dim;
  h.seed_ = seed;
  Rng rng(mix_seed(seed, 0x4ead));
  auto proj = std::make_shared<nn::Sequential>();
  proj->add("fc", std::make_unique<nn::Linear>(raw->dim(), out_dim, rng)).add("act", std::make_unique<nn::Relu>());
  proj->set_frozen(true);
  h.projection_ = std::move(proj);
  h.table_ = std::move(raw);
  return h;
}

HeadSource HeadSource::file_backed(std::shared_ptr<const data::FeatureTable> features) {
  if (!features || features->dim() == 0) throw Error(ErrorCode::kInvalidConfig, "file-backed head: empty table");
  HeadSource h;
  h.kind_ = Kind::kFileBacked;
  h.feature_dim_ = features->dim();
  h.table_ = std::move(features);
  return h;
}

Matrix HeadSource::project(const Matrix &raw) const {
  if (kind_ != Kind::kSynthetic) throw Error(ErrorCode::kInvalidInput, "file-backed head has no projection");
  return projection_->predict(raw);
}

Matrix HeadSource::features(std::span<const data::SampleId> ids) const {
  if (!table_) throw Error(ErrorCode::kInvalidInput, "head source not initialized");
  Matrix rows = table_->lookup(ids);
  return kind_ == Kind::kSynthetic ? projection_->predict(rows) : rows;
}

// --------------------------------------------------------------- Builders

nn::Sequential make_tail(std::size_t in_dim, std::size_t num_classes, const ArchConfig &arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(mix_seed(seed, 0x7a11));
  nn::Sequential s;
  s.add("fc1", std::make_unique<nn::Linear>(in_dim, arch.tail_hidden, rng));
  s.add("act", std::make_unique<nn::Relu>());
  s.add("drop", std::make_unique<nn::Dropout>(arch.tail_dropout, mix_seed(seed, 0x7a12)));
  s.add("fc2", std::make_unique<nn::Linear>(arch.tail_hidden, num_classes, rng));
  return s;
}

nn::Sequential make_ce(std::size_t in_dim, const ArchConfig &arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(mix_seed(seed, 0xce01));
  nn::Sequential skip;
  if (in_dim != arch.embed_dim) skip.add("proj", std::make_unique<nn::Linear>(in_dim, arch.embed_dim, rng));
  nn::Sequential body;
  body.add("fc1", std::make_unique<nn::Linear>(in_dim, arch.ce_hidden, rng));
  body.add("act1", std::make_unique<nn::Relu>());
  body.add("drop1", std::make_unique<nn::Dropout>(arch.ce_dropout, mix_seed(seed, 0xce02)));
  body.add("fc2", std::make_unique<nn::Linear>(arch.ce_hidden, arch.embed_dim, rng));
  body.add("act2", std::make_unique<nn::Relu>());
  body.add("drop2", std::make_unique<nn::Dropout>(arch.ce_dropout, mix_seed(seed, 0xce03)));
  nn::Sequential s;
  s.add("block", std::make_unique<nn::Residual>(std::move(skip), std::move(body)));
  s.add("norm", std::make_unique<nn::LayerNorm>(arch.embed_dim));
  return s;
}

nn::Sequential make_co(std::size_t num_classes, const ArchConfig &arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(mix_seed(seed, 0xc001));
  nn::Sequential s;
  s.add("fc1", std::make_unique<nn::Linear>(arch.embed_dim, arch.co_hidden, rng));
  s.add("act", std::make_unique<nn::Relu>());
  s.add("drop", std::make_unique<nn::Dropout>(arch.co_dropout, mix_seed(seed, 0xc002)));
  s.add("fc2", std::make_unique<nn::Linear>(arch.co_hidden, num_classes, rng));
  return s;
}

CoWeights co_weights(const nn::Sequential &co) {
  const auto *first = dynamic_cast<const nn::Linear *>(&co.at("fc1"));
  const auto *second = dynamic_cast<const nn::Linear *>(&co.at("fc2"));
  if (!first || !second) throw Error(ErrorCode::kInvalidInput, "CO stack lacks fc1/fc2 linear layers");
  return {first, second};
}

DeviceState make_device(std::size_t id, HeadSource head, std::size_t num_classes, data::Dataset local,
                        const ArchConfig &arch, std::uint64_t seed) {
  if (num_classes < 2) throw Error(ErrorCode::kInvalidConfig, "device needs >= 2 classes");
  DeviceState d;
  d.id = id;
  d.num_classes = num_classes;
  d.seed = seed;
  d.tail = make_tail(head.feature_dim(), num_classes, arch, mix_seed(seed, 1));
  d.ce = make_ce(head.feature_dim(), arch, mix_seed(seed, 2));
  d.co = make_co(num_classes, arch, mix_seed(seed, 3));
  d.head = std::move(head);
  d.local = std::move(local);
  return d;
}

// ---------------------------------------------------------------- Forward

namespace {

void require_cols(const Matrix &m, std::size_t cols, const char *what) {
  if (m.cols() != cols) {
    throw Error(ErrorCode::kShapeError, std::string(what) + ": got " + std::to_string(m.cols()) +
                                            " columns, expected " + std::to_string(cols));
  }
}

}  // namespace

Matrix embed(const DeviceState &device, const Matrix &features) {
  require_cols(features, device.head.feature_dim(), "embed");
  return device.ce.predict(features);
}

Matrix co_predict(const DeviceState &device, const Matrix &embeddings) {
  require_cols(embeddings, co_weights(device.co).first->in_features(), "co_predict");
  return device.co.predict(embeddings);
}

Matrix solo_predict(const DeviceState &device, const Matrix &features) {
  require_cols(features, device.head.feature_dim(), "solo_predict");
  return device.tail.predict(features);
}

// --------------------------------------------------------------- Training

TailReport pretrain_tail(DeviceState &device, const nn::TrainLoopConfig &loop, const nn::AdamConfig &adam_cfg) {
  loop.validate();
  const auto &ids = device.local.ids();
  const auto &labels = device.local.labels();
  const std::size_t n = ids.size();
  if (n < 2) throw Error(ErrorCode::kInvalidBatch, "tail pretraining needs >= 2 local samples");
  const Matrix all = device.features(ids);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng split_rng(mix_seed(loop.seed, 0x5917));
  split_rng.shuffle(order);
  const auto n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(loop.validation_fraction * static_cast<double>(n))), 1, n - 1);
  const std::vector<std::size_t> train_rows(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_val));
  const std::vector<std::size_t> val_rows(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
  const Matrix train_x = all.gather_rows(train_rows);
  const Matrix val_x = all.gather_rows(val_rows);
  std::vector<int> train_y, val_y;
  for (std::size_t r : train_rows) train_y.push_back(labels[r]);
  for (std::size_t r : val_rows) val_y.push_back(labels[r]);

  nn::Adam adam(adam_cfg);
  Rng batch_rng(mix_seed(loop.seed, 0xba7c));
  const std::size_t per_epoch = (train_rows.size() + loop.batch_size - 1) / loop.batch_size;
  const double total_steps = static_cast<double>(per_epoch * loop.max_epochs);
  TailReport report;
  report.best_validation_loss = std::numeric_limits<double>::infinity();
  auto best = nn::snapshot_parameters(device.tail);
  std::size_t since_best = 0, step = 0;
  for (std::size_t epoch = 0; epoch < loop.max_epochs; ++epoch) {
    for (const auto &batch : nn::make_batches(train_rows.size(), loop.batch_size, batch_rng)) {
      std::vector<int> y;
      y.reserve(batch.size());
      for (std::size_t r : batch) y.push_back(train_y[r]);
      device.tail.zero_grad();
      const Matrix logits = device.tail.forward(train_x.gather_rows(batch), nn::Mode::kTrain);
      device.tail.backward(losses::cross_entropy(logits, y).grad);
      adam.step(device.tail, static_cast<double>(step++) / total_steps);
    }
    ++report.epochs_run;
    const double val_loss = losses::cross_entropy(device.tail.predict(val_x), val_y).value;
    if (val_loss < report.best_validation_loss) {
      report.best_validation_loss = val_loss;
      report.best_epoch = epoch + 1;
      best = nn::snapshot_parameters(device.tail);
      since_best = 0;
    } else if (++since_best >= loop.early_stop_patience) {
      break;
    }
  }
  nn::restore_parameters(device.tail, best);
  return report;
}

// ------------------------------------------------------------- Checkpoint

namespace {

constexpr char kCheckpointMagic[4] = {'C', 'E', 'C', 'K'};
constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
void put(std::string &out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

struct Reader {
  std::string_view bytes;
  std::size_t offset = 0;

  void need(std::size_t n) const {
    if (bytes.size() - offset < n) throw Error(ErrorCode::kFormatError, "truncated checkpoint", offset);
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<T>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i));
    }
    offset += sizeof(T);
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(bytes.substr(offset, n));
    offset += n;
    return s;
  }
};

}  // namespace

std::string encode_checkpoint(const Checkpoint &ckpt) {
  std::string out(kCheckpointMagic, 4);
  put<std::uint16_t>(out, kCheckpointVersion);
  put<std::uint16_t>(out, static_cast<std::uint16_t>(ckpt.config_hash.size()));
  out += ckpt.config_hash;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto &[name, m] : ckpt.tensors) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put<std::uint64_t>(out, m.rows());
    put<std::uint64_t>(out, m.cols());
    for (float v : m.values()) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader in{bytes};
  if (in.text(4) != std::string_view(kCheckpointMagic, 4)) throw Error(ErrorCode::kFormatError, "bad magic", 0);
  if (in.get<std::uint16_t>() != kCheckpointVersion) {
    throw Error(ErrorCode::kFormatError, "unsupported checkpoint version", 4);
  }
  Checkpoint ckpt;
  ckpt.config_hash = in.text(in.get<std::uint16_t>());
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name = in.text(in.get<std::uint16_t>());
    const auto rows = in.get<std::uint64_t>();
    const auto cols = in.get<std::uint64_t>();
    if (cols != 0 && rows > (bytes.size() - in.offset) / 4 / cols) {
      throw Error(ErrorCode::kFormatError, "tensor exceeds file size", in.offset);
    }
    std::vector<float> values(rows * cols);
    for (float &v : values) v = std::bit_cast<float>(in.get<std::uint32_t>());
    ckpt.tensors.emplace_back(std::move(name), Matrix(rows, cols, std::move(values)));
  }
  if (in.offset != bytes.size()) throw Error(ErrorCode::kFormatError, "trailing bytes in checkpoint", in.offset);
  return ckpt;
}

void write_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIoError, "short write to " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Checkpoint device_checkpoint(const DeviceState &device, const std::string &config_hash) {
  Checkpoint ckpt{config_hash, {}};
  for (const auto &[prefix, stack] : {std::pair<const char *, const nn::Sequential *>{"tail.", &device.tail},
                                      {"ce.", &device.ce},
                                      {"co.", &device.co}}) {
    for (auto &[name, value] : nn::snapshot_parameters(*stack)) ckpt.tensors.emplace_back(prefix + name, value);
  }
  return ckpt;
}

void load_device_checkpoint(DeviceState &device, const Checkpoint &ckpt) {
  std::size_t index = 0;
  for (const auto &[prefix, stack] : {std::pair<std::string, nn::Sequential *>{"tail.", &device.tail},
                                      {"ce.", &device.ce},
                                      {"co.", &device.co}}) {
    auto expected = nn::snapshot_parameters(*stack);
    for (auto &[name, value] : expected) {
      if (index >= ckpt.tensors.size() || ckpt.tensors[index].first != prefix + name) {
        throw Error(ErrorCode::kFormatError, "checkpoint layout mismatch at " + prefix + name);
      }
      value = ckpt.tensors[index++].second;
    }
    nn::restore_parameters(*stack, expected);
  }
  if (index != ckpt.tensors.size()) throw Error(ErrorCode::kFormatError, "checkpoint has extra tensors");
}

}  // namespace fedinfer::zoo
