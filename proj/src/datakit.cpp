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

#include "fedinfer/datakit.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace fedinfer::data {

// ----------------------------------------------------------------- Dataset

Dataset::Dataset(std::vector<SampleId> ids, std::optional<std::vector<int>> labels, std::size_t num_classes)
    : ids_(std::move(ids)), labels_(std::move(labels)), num_classes_(num_classes) {
  std::vector<SampleId> sorted = ids_;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw Error(ErrorCode::kInvalidInput, "Dataset: duplicate sample id");
  }
  if (labels_) {
    if (labels_->size() != ids_.size()) throw Error(ErrorCode::kShapeError, "Dataset: label count mismatch");
    for (int y : *labels_) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes_) {
        throw Error(ErrorCode::kInvalidLabel, "Dataset: label " + std::to_string(y) + " out of range");
      }
    }
  }
}

const std::vector<int> &Dataset::labels() const {
  if (!labels_) throw Error(ErrorCode::kLabelUnavailable, "dataset carries no labels");
  return *labels_;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  std::vector<SampleId> ids;
  ids.reserve(rows.size());
  std::optional<std::vector<int>> labels;
  if (labels_) labels.emplace().reserve(rows.size());
  for (std::size_t r : rows) {
    if (r >= ids_.size()) throw Error(ErrorCode::kShapeError, "Dataset::subset: row out of range");
    ids.push_back(ids_[r]);
    if (labels_) labels->push_back((*labels_)[r]);
  }
  return Dataset(std::move(ids), std::move(labels), num_classes_);
}

std::set<int> Dataset::label_set() const {
  const auto &ys = labels();
  return {ys.begin(), ys.end()};
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes_, 0);
  for (int y : labels()) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

// ------------------------------------------------------------ FeatureTable

FeatureTable::FeatureTable(std::vector<SampleId> ids, Matrix features)
    : ids_(std::move(ids)), features_(std::move(features)) {
  if (ids_.size() != features_.rows()) throw Error(ErrorCode::kShapeError, "FeatureTable: id/row count mismatch");
  index_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!index_.emplace(ids_[i], i).second) throw Error(ErrorCode::kInvalidInput, "FeatureTable: duplicate id");
  }
}

Matrix FeatureTable::lookup(std::span<const SampleId> ids) const {
  Matrix out(ids.size(), features_.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto it = index_.find(ids[i]);
    if (it == index_.end()) {
      throw Error(ErrorCode::kInvalidInput, "FeatureTable: unknown sample id " + std::to_string(ids[i]));
    }
    auto src = features_.row(it->second);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// --------------------------------------------------------------- Synthetic

void SyntheticTaskConfig::validate() const {
  if (num_classes < 2) throw Error(ErrorCode::kInvalidConfig, "synthetic task needs >= 2 classes");
  if (input_dim == 0) throw Error(ErrorCode::kInvalidConfig, "synthetic input_dim must be > 0");
  if (!(separation > 0.0) || !(stddev > 0.0)) {
    throw Error(ErrorCode::kInvalidConfig, "synthetic separation and stddev must be > 0");
  }
  if (train_per_class == 0) throw Error(ErrorCode::kInvalidConfig, "synthetic train_per_class must be > 0");
}

SyntheticTask synth_generate(const SyntheticTaskConfig &cfg) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, 0x5717));
  const std::size_t c = cfg.num_classes, d = cfg.input_dim;

  // Random directions scaled so that |mu_i - mu_j| ~= separation * stddev.
  Matrix means(c, d);
  const double radius = cfg.separation * cfg.stddev / std::sqrt(2.0);
  for (std::size_t k = 0; k < c; ++k) {
    std::vector<double> dir(d);
    double norm = 0.0;
    for (double &v : dir) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < d; ++j) means(k, j) = static_cast<float>(radius * dir[j] / norm);
  }

  auto make_split = [&](std::size_t per_class, SampleId first_id, std::vector<SampleId> &ids,
                        std::vector<int> &labels, std::vector<float> &rows) {
    std::vector<int> order;
    for (std::size_t k = 0; k < c; ++k) order.insert(order.end(), per_class, static_cast<int>(k));
    rng.shuffle(order);
    for (std::size_t i = 0; i < order.size(); ++i) {
      ids.push_back(first_id + static_cast<SampleId>(i));
      labels.push_back(order[i]);
      auto mu = means.row(static_cast<std::size_t>(order[i]));
      for (std::size_t j = 0; j < d; ++j) rows.push_back(static_cast<float>(mu[j] + cfg.stddev * rng.normal()));
    }
  };

  std::vector<SampleId> train_ids, test_ids;
  std::vector<int> train_labels, test_labels;
  std::vector<float> rows;
  make_split(cfg.train_per_class, 0, train_ids, train_labels, rows);
  make_split(cfg.test_per_class, static_cast<SampleId>(train_ids.size()), test_ids, test_labels, rows);

  std::vector<SampleId> all_ids = train_ids;
  all_ids.insert(all_ids.end(), test_ids.begin(), test_ids.end());
  const std::size_t total = all_ids.size();
  SyntheticTask task;
  task.inputs = FeatureTable(std::move(all_ids), Matrix(total, d, std::move(rows)));
  task.train = Dataset(std::move(train_ids), std::move(train_labels), c);
  task.test = Dataset(std::move(test_ids), std::move(test_labels), c);
  task.class_means = std::move(means);
  return task;
}

// ----------------------------------------------------------------- Holdout

HoldoutSplit holdout_shared(const Dataset &dataset, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw Error(ErrorCode::kInvalidConfig, "holdout fraction must be in (0, 1)");
  }
  const std::size_t n = dataset.size();
  const auto shared_count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, 0x401d));
  rng.shuffle(order);
  std::vector<std::size_t> shared_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(shared_count));
  std::vector<std::size_t> local_rows(order.begin() + static_cast<std::ptrdiff_t>(shared_count), order.end());
  std::sort(shared_rows.begin(), shared_rows.end());
  std::sort(local_rows.begin(), local_rows.end());

  HoldoutSplit split;
  split.local_pool = dataset.subset(local_rows);
  const Dataset shared = dataset.subset(shared_rows);
  if (shared.has_labels()) split.shared_oracle_labels = shared.labels();
  split.shared = shared.without_labels();
  return split;
}

// --------------------------------------------------------------- Partition

std::string_view to_string(PartitionScheme scheme) {
  switch (scheme) {
    case PartitionScheme::kMild: return "mild";
    case PartitionScheme::kModerate: return "moderate";
    case PartitionScheme::kSkewed: return "skewed";
    case PartitionScheme::kDisjoint: return "disjoint";
    case PartitionScheme::kDirichlet: return "dirichlet";
  }
  return "unknown";
}

PartitionScheme parse_partition_scheme(std::string_view name) {
  for (auto s : {PartitionScheme::kMild, PartitionScheme::kModerate, PartitionScheme::kSkewed,
                 PartitionScheme::kDisjoint, PartitionScheme::kDirichlet}) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorCode::kInvalidConfig, "unknown partition scheme '" + std::string(name) + "'");
}

std::vector<std::size_t> largest_remainder(std::span<const double> proportions, std::size_t total) {
  const double sum = std::accumulate(proportions.begin(), proportions.end(), 0.0);
  if (proportions.empty() || !(sum > 0.0)) throw Error(ErrorCode::kInvalidInput, "largest_remainder: empty weights");
  std::vector<std::size_t> counts(proportions.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < proportions.size(); ++i) {
    const double exact = proportions[i] / sum * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    remainders.emplace_back(exact - static_cast<double>(counts[i]), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto &a, const auto &b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++counts[remainders[i % remainders.size()].second];
  return counts;
}

std::vector<std::vector<double>> manual_shares(PartitionScheme scheme, std::size_t num_devices,
                                               std::size_t num_classes) {
  if (scheme == PartitionScheme::kDirichlet) {
    throw Error(ErrorCode::kInvalidConfig, "dirichlet is not a manual scheme");
  }
  if (num_devices != 3) {
    throw Error(ErrorCode::kInvalidConfig, "manual partition schemes are defined for exactly 3 devices, got " +
                                               std::to_string(num_devices));
  }
  if (num_classes < 3) throw Error(ErrorCode::kInvalidConfig, "manual partition schemes need >= 3 classes");
  const std::size_t k = num_devices, c = num_classes;
  std::vector<std::vector<double>> shares(k, std::vector<double>(c, 0.0));
  auto split_evenly = [&](std::size_t cls, const std::vector<std::size_t> &holders) {
    for (std::size_t d : holders) shares[d][cls] = 1.0 / static_cast<double>(holders.size());
  };
  switch (scheme) {
    case PartitionScheme::kMild:
      // Device d lacks label d.
      for (std::size_t cls = 0; cls < c; ++cls) {
        std::vector<std::size_t> holders;
        for (std::size_t d = 0; d < k; ++d) {
          if (d != cls) holders.push_back(d);
        }
        split_evenly(cls, holders);
      }
      break;
    case PartitionScheme::kModerate:
      for (std::size_t cls = 0; cls < c; ++cls) split_evenly(cls, {cls % 3, (cls + 1) % 3});
      break;
    case PartitionScheme::kSkewed: {
      // The first 60% of labels sit almost entirely on device 0.
      const auto heavy = static_cast<std::size_t>(std::ceil(0.6 * static_cast<double>(c)));
      for (std::size_t cls = 0; cls < c; ++cls) {
        if (cls < heavy) {
          shares[0][cls] = 0.9;
          shares[cls % 2 + 1][cls] = 0.1;
        } else {
          split_evenly(cls, {0, 1, 2});
        }
      }
      break;
    }
    case PartitionScheme::kDisjoint: {
      std::size_t cls = 0;
      for (std::size_t d = 0; d < k; ++d) {
        const std::size_t block = c / k + (d < c % k ? 1 : 0);
        for (std::size_t i = 0; i < block; ++i, ++cls) shares[d][cls] = 1.0;
      }
      break;
    }
    case PartitionScheme::kDirichlet:
      break;
  }
  return shares;
}

namespace {

std::vector<std::vector<std::size_t>> rows_by_class(const Dataset &pool) {
  std::vector<std::vector<std::size_t>> by_class(pool.num_classes());
  const auto &labels = pool.labels();
  for (std::size_t r = 0; r < labels.size(); ++r) by_class[static_cast<std::size_t>(labels[r])].push_back(r);
  return by_class;
}

// Deals each class's shuffled rows to devices in contiguous chunks of counts[d][c].
Partition deal(const Dataset &pool, std::vector<std::vector<std::size_t>> by_class, PartitionSpec spec, Rng &rng) {
  std::vector<std::vector<std::size_t>> device_rows(spec.num_devices);
  for (std::size_t cls = 0; cls < by_class.size(); ++cls) {
    rng.shuffle(by_class[cls]);
    std::size_t offset = 0;
    for (std::size_t d = 0; d < spec.num_devices; ++d) {
      const std::size_t take = spec.counts[d][cls];
      device_rows[d].insert(device_rows[d].end(), by_class[cls].begin() + static_cast<std::ptrdiff_t>(offset),
                            by_class[cls].begin() + static_cast<std::ptrdiff_t>(offset + take));
      offset += take;
    }
  }
  Partition out;
  for (auto &rows : device_rows) {
    if (rows.empty()) throw Error(ErrorCode::kPartitionFailed, "partition produced an empty device");
    std::sort(rows.begin(), rows.end());
    out.devices.push_back(pool.subset(rows));
  }
  out.spec = std::move(spec);
  return out;
}

}  // namespace

Partition partition_manual(const Dataset &pool, PartitionScheme scheme, std::size_t num_devices, std::uint64_t seed) {
  const auto shares = manual_shares(scheme, num_devices, pool.num_classes());
  auto by_class = rows_by_class(pool);
  PartitionSpec spec{scheme, 0.0, num_devices, seed, std::vector<std::vector<std::size_t>>(
                                                         num_devices, std::vector<std::size_t>(pool.num_classes(), 0))};
  std::vector<double> column(num_devices);
  for (std::size_t cls = 0; cls < pool.num_classes(); ++cls) {
    for (std::size_t d = 0; d < num_devices; ++d) column[d] = shares[d][cls];
    const auto counts = largest_remainder(column, by_class[cls].size());
    for (std::size_t d = 0; d < num_devices; ++d) spec.counts[d][cls] = counts[d];
  }
  Rng rng(mix_seed(seed, 0x3a27));
  return deal(pool, std::move(by_class), std::move(spec), rng);
}

Partition partition_dirichlet(const Dataset &pool, double alpha, std::size_t num_devices, std::uint64_t seed) {
  if (!(alpha > 0.0)) throw Error(ErrorCode::kInvalidConfig, "dirichlet alpha must be > 0");
  if (num_devices < 2) throw Error(ErrorCode::kInvalidConfig, "dirichlet partition needs >= 2 devices");
  auto by_class = rows_by_class(pool);
  Rng rng(mix_seed(seed, 0xd1c7));
  const std::vector<double> concentration(num_devices, alpha);
  constexpr int kMaxRedraws = 100;
  for (int attempt = 0; attempt <= kMaxRedraws; ++attempt) {
    PartitionSpec spec{PartitionScheme::kDirichlet, alpha, num_devices, seed,
                       std::vector<std::vector<std::size_t>>(num_devices,
                                                             std::vector<std::size_t>(pool.num_classes(), 0))};
    std::vector<std::size_t> totals(num_devices, 0);
    for (std::size_t cls = 0; cls < pool.num_classes(); ++cls) {
      const auto proportions = rng.dirichlet(concentration);
      const auto counts = largest_remainder(proportions, by_class[cls].size());
      for (std::size_t d = 0; d < num_devices; ++d) {
        spec.counts[d][cls] = counts[d];
        totals[d] += counts[d];
      }
    }
    if (std::all_of(totals.begin(), totals.end(), [](std::size_t t) { return t > 0; })) {
      return deal(pool, std::move(by_class), std::move(spec), rng);
    }
  }
  throw Error(ErrorCode::kPartitionFailed, "dirichlet partition left a device empty after 100 redraws");
}

// ------------------------------------------------------------- File format

namespace {

template <typename T>
void put_le(std::string &out, T value) {
  using U = std::make_unsigned_t<std::conditional_t<std::is_floating_point_v<T>, std::uint32_t, T>>;
  U bits;
  static_assert(sizeof(U) == sizeof(T));
  std::memcpy(&bits, &value, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t offset) {
  using U = std::make_unsigned_t<std::conditional_t<std::is_floating_point_v<T>, std::uint32_t, T>>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bits |= static_cast<U>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  T value;
  std::memcpy(&value, &bits, sizeof(T));
  return value;
}

void bulk_put(std::string &out, const void *src, std::size_t count, std::size_t width) {
  if constexpr (std::endian::native == std::endian::little) {
    out.append(static_cast<const char *>(src), count * width);
  } else {
    const auto *p = static_cast<const unsigned char *>(src);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t b = 0; b < width; ++b) out.push_back(static_cast<char>(p[i * width + width - 1 - b]));
    }
  }
}

void bulk_get(std::string_view bytes, std::size_t offset, void *dst, std::size_t count, std::size_t width) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, bytes.data() + offset, count * width);
  } else {
    auto *p = static_cast<unsigned char *>(dst);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t b = 0; b < width; ++b) p[i * width + width - 1 - b] = bytes[offset + i * width + b];
    }
  }
}

}  // namespace

std::string encode_features(const FeatureFile &file) {
  const std::size_t rows = file.features.rows(), cols = file.features.cols();
  if (file.ids.size() != rows) throw Error(ErrorCode::kShapeError, "feature file: id count != rows");
  if (file.labels && file.labels->size() != rows) throw Error(ErrorCode::kShapeError, "feature file: label count");
  std::string out;
  out.reserve(kFeatureHeaderBytes + rows * cols * 4 + rows * 8);
  out.append("CEFI", 4);
  put_le<std::uint16_t>(out, kFeatureFileVersion);
  put_le<std::uint8_t>(out, 0);
  put_le<std::uint8_t>(out, file.labels ? 1 : 0);
  put_le<std::uint64_t>(out, rows);
  put_le<std::uint64_t>(out, cols);
  bulk_put(out, file.features.data(), rows * cols, 4);
  bulk_put(out, file.ids.data(), rows, 4);
  if (file.labels) bulk_put(out, file.labels->data(), rows, 4);
  return out;
}

FeatureFile decode_features(std::string_view bytes) {
  auto need = [&](std::size_t offset, std::size_t length, const char *what) {
    if (bytes.size() < offset || bytes.size() - offset < length) {
      throw Error(ErrorCode::kFormatError, std::string("truncated ") + what, std::min<std::uint64_t>(bytes.size(), offset));
    }
  };
  need(0, 4, "magic");
  if (bytes.substr(0, 4) != "CEFI") throw Error(ErrorCode::kFormatError, "bad magic", 0);
  need(4, 2, "version");
  if (const auto v = get_le<std::uint16_t>(bytes, 4); v != kFeatureFileVersion) {
    throw Error(ErrorCode::kFormatError, "unsupported version " + std::to_string(v), 4);
  }
  need(6, 1, "dtype");
  if (const auto dtype = get_le<std::uint8_t>(bytes, 6); dtype != 0) {
    throw Error(ErrorCode::kFormatError, "unsupported dtype " + std::to_string(dtype), 6);
  }
  need(7, 1, "flags");
  const auto flags = get_le<std::uint8_t>(bytes, 7);
  if ((flags & ~1u) != 0) throw Error(ErrorCode::kFormatError, "unknown flag bits", 7);
  need(8, 16, "shape");
  const auto rows = get_le<std::uint64_t>(bytes, 8);
  const auto cols = get_le<std::uint64_t>(bytes, 16);
  // Guard the size arithmetic before allocating anything.
  const std::uint64_t limit = bytes.size();
  if (cols != 0 && rows > limit / 4 / cols) throw Error(ErrorCode::kFormatError, "shape exceeds file size", 8);
  if (rows > limit / 4) throw Error(ErrorCode::kFormatError, "shape exceeds file size", 8);

  std::size_t offset = kFeatureHeaderBytes;
  FeatureFile file;
  need(offset, rows * cols * 4, "feature block");
  std::vector<float> values(rows * cols);
  bulk_get(bytes, offset, values.data(), rows * cols, 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw Error(ErrorCode::kFormatError, "non-finite feature", offset + 4 * i);
  }
  file.features = Matrix(rows, cols, std::move(values));
  offset += rows * cols * 4;
  need(offset, rows * 4, "id block");
  file.ids.resize(rows);
  bulk_get(bytes, offset, file.ids.data(), rows, 4);
  offset += rows * 4;
  if (flags & 1u) {
    need(offset, rows * 4, "label block");
    file.labels.emplace(rows);
    bulk_get(bytes, offset, file.labels->data(), rows, 4);
    offset += rows * 4;
  }
  if (offset != bytes.size()) throw Error(ErrorCode::kFormatError, "trailing bytes", offset);
  return file;
}

void write_features(const std::filesystem::path &path, const FeatureFile &file) {
  const std::string bytes = encode_features(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIoError, "short write to " + path.string());
}

FeatureFile read_features(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_features(bytes);
}

}  // namespace fedinfer::data
