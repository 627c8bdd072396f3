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

#include "fedinfer/evalkit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace fedinfer::eval {

void TaskConfig::validate() const {
  synth.validate();
  if (!(shared_fraction > 0.0 && shared_fraction < 1.0)) {
    throw Error(ErrorCode::kInvalidConfig, "shared fraction must be in (0, 1)");
  }
  if (num_devices < 1) throw Error(ErrorCode::kInvalidConfig, "need at least one device");
  if (scheme == data::PartitionScheme::kDirichlet && !(alpha > 0.0)) {
    throw Error(ErrorCode::kInvalidConfig, "dirichlet alpha must be > 0");
  }
}

void ExperimentConfig::validate() const {
  task.validate();
  arch.validate();
  tail_loop.validate();
  fed.validate(task.num_devices);
  if (rules.empty()) throw Error(ErrorCode::kInvalidConfig, "no ensemble rules selected");
}

// ----------------------------------------------------------------- System

data::SyntheticTask generate_task(const ExperimentConfig &cfg) {
  data::SyntheticTaskConfig synth = cfg.task.synth;
  synth.seed = mix_seed(cfg.seed, 0x1);
  return data::synth_generate(synth);
}

data::HoldoutSplit split_shared(const ExperimentConfig &cfg, const data::Dataset &train) {
  return data::holdout_shared(train, cfg.task.shared_fraction, mix_seed(cfg.seed, 0x2));
}

data::Partition partition_local(const ExperimentConfig &cfg, const data::Dataset &local_pool) {
  const std::uint64_t seed = mix_seed(cfg.seed, 0x3);
  return cfg.task.scheme == data::PartitionScheme::kDirichlet
             ? data::partition_dirichlet(local_pool, cfg.task.alpha, cfg.task.num_devices, seed)
             : data::partition_manual(local_pool, cfg.task.scheme, cfg.task.num_devices, seed);
}

System assemble_system(const ExperimentConfig &cfg, data::SyntheticTask task, data::HoldoutSplit split,
                       data::Partition partition, std::vector<std::shared_ptr<const data::FeatureTable>> device_tables) {
  cfg.validate();
  const std::size_t k = cfg.task.num_devices;
  if (partition.devices.size() != k) throw Error(ErrorCode::kInvalidConfig, "partition does not match device count");
  if (!device_tables.empty() && device_tables.size() != k) {
    throw Error(ErrorCode::kInvalidConfig, "need one feature table per device");
  }
  System sys;
  sys.task = std::move(task);
  sys.split = std::move(split);
  sys.partition = std::move(partition);
  sys.device_tables = std::move(device_tables);
  if (sys.device_tables.empty()) sys.raw = std::make_shared<const data::FeatureTable>(sys.task.inputs);
  const std::size_t classes = cfg.task.synth.num_classes;
  for (std::size_t d = 0; d < k; ++d) {
    auto head = sys.device_tables.empty()
                    ? zoo::HeadSource::synthetic(sys.raw, cfg.arch.head_dim, mix_seed(cfg.seed, 0x100 + d))
                    : zoo::HeadSource::file_backed(sys.device_tables[d]);
    sys.devices.push_back(
        zoo::make_device(d, std::move(head), classes, sys.partition.devices[d], cfg.arch, mix_seed(cfg.seed, 0x200 + d)));
    sys.co_init.push_back(sys.devices.back().co);
  }
  return sys;
}

System build_system(const ExperimentConfig &cfg) {
  cfg.validate();
  auto task = generate_task(cfg);
  auto split = split_shared(cfg, task.train);
  auto partition = partition_local(cfg, split.local_pool);
  return assemble_system(cfg, std::move(task), std::move(split), std::move(partition));
}

std::vector<zoo::TailReport> pretrain_tails(System &system, const ExperimentConfig &cfg) {
  std::vector<zoo::TailReport> reports;
  for (auto &d : system.devices) {
    nn::TrainLoopConfig loop = cfg.tail_loop;
    loop.seed = mix_seed(cfg.seed, 0x300 + d.id);
    reports.push_back(zoo::pretrain_tail(d, loop, cfg.fed.adam));
  }
  return reports;
}

fed::CeReport train_ce(System &system, const ExperimentConfig &cfg, fed::CommMeter &meter) {
  fed::FederationConfig fc = cfg.fed;
  fc.seed = mix_seed(cfg.seed, 0x4);
  return fed::train_ce(system.devices, system.split.shared.ids(), fc, meter);
}

std::vector<fed::CoReport> train_co(System &system, const ExperimentConfig &cfg, fed::CommMeter &meter) {
  fed::FederationConfig fc = cfg.fed;
  fc.seed = mix_seed(cfg.seed, 0x5);
  std::vector<fed::CoReport> reports;
  for (auto &d : system.devices) reports.push_back(fed::train_co_local(d, system.split.shared.ids(), fc, meter));
  return reports;
}

// -------------------------------------------------------------- Baselines

double label_accuracy(const Matrix &logits, std::span<const int> labels) {
  if (logits.rows() != labels.size()) throw Error(ErrorCode::kShapeError, "accuracy: row/label mismatch");
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (static_cast<int>(argmax(logits.row(r))) == labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::vector<double> run_solo_baseline(const std::vector<zoo::DeviceState> &devices, const data::Dataset &test) {
  std::vector<double> acc;
  for (const auto &d : devices) acc.push_back(label_accuracy(zoo::solo_predict(d, d.features(test.ids())), test.labels()));
  return acc;
}

double run_input_sharing_fi(const std::vector<zoo::DeviceState> &devices, const data::Dataset &test, ens::Rule rule,
                            std::uint64_t seed) {
  std::vector<Matrix> logits;
  for (const auto &d : devices) logits.push_back(zoo::solo_predict(d, d.features(test.ids())));
  return ens::accuracy(ens::apply_batch(rule, logits, test.labels(), seed), test.labels());
}

EdgeEnsemble train_edge_ensemble(const System &system, const ExperimentConfig &cfg) {
  if (!system.raw) throw Error(ErrorCode::kInvalidConfig, "edge ensemble needs raw inputs for its common head");
  EdgeEnsemble out{zoo::HeadSource::synthetic(system.raw, cfg.arch.head_dim, mix_seed(cfg.seed, 0x600)), {}};
  for (const auto &d : system.devices) {
    zoo::DeviceState edge =
        zoo::make_device(d.id, out.head, d.num_classes, d.local, cfg.arch, mix_seed(cfg.seed, 0x700 + d.id));
    nn::TrainLoopConfig loop = cfg.tail_loop;
    loop.seed = mix_seed(cfg.seed, 0x300 + d.id);
    zoo::pretrain_tail(edge, loop, cfg.fed.adam);
    out.tails.push_back(std::move(edge.tail));
  }
  return out;
}

double run_edge_ensemble(const zoo::HeadSource &shared_head, const std::vector<nn::Sequential> &tails,
                         const data::Dataset &test, ens::Rule rule, std::uint64_t seed) {
  const Matrix features = shared_head.features(test.ids());
  std::vector<Matrix> logits;
  for (const auto &tail : tails) logits.push_back(tail.predict(features));
  return ens::accuracy(ens::apply_batch(rule, logits, test.labels(), seed), test.labels());
}

FiAccuracy run_ce_fi(const std::vector<zoo::DeviceState> &devices, const data::Dataset &test,
                     const std::vector<ens::Rule> &rules, fed::CommMeter &meter, std::uint64_t seed,
                     const Matrix *embedding_override) {
  FiAccuracy out;
  for (std::size_t origin = 0; origin < devices.size(); ++origin) {
    fed::InferenceOptions options;
    options.embedding_override = embedding_override;
    const auto result = fed::federated_infer(origin, test.ids(), devices, meter, options);
    for (ens::Rule rule : rules) {
      out[rule].push_back(ens::accuracy(ens::apply_batch(rule, result.logits, test.labels(), seed), test.labels()));
    }
  }
  return out;
}

// ----------------------------------------------------------------- Theory

EquivalenceResult verify_fi_equivalence(const std::vector<zoo::DeviceState> &devices, const data::Dataset &test,
                                        const std::vector<ens::Rule> &rules, double shift_scale, std::uint64_t seed) {
  const auto &ids = test.ids();
  const std::size_t n = ids.size(), k = devices.size();
  const Matrix canonical = fed::idealize_consensus(devices, ids);

  // The ideal CO sees only an embedding; it recovers the sample from the embedding's bytes.
  const auto key = [](std::span<const float> row) {
    return std::string(reinterpret_cast<const char *>(row.data()), row.size_bytes());
  };
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t r = 0; r < n; ++r) {
    if (!row_of.emplace(key(canonical.row(r)), r).second) {
      throw Error(ErrorCode::kInvalidInput, "canonical embeddings are not unique per sample");
    }
  }
  std::vector<Matrix> solo, shifted;
  for (std::size_t d = 0; d < k; ++d) {
    solo.push_back(zoo::solo_predict(devices[d], devices[d].features(ids)));
    Matrix s = solo.back();
    Rng rng(mix_seed(seed, 0xe0 + d));
    for (std::size_t r = 0; r < n; ++r) {
      const auto c = static_cast<float>(rng.uniform(-shift_scale, shift_scale));
      for (float &v : s.row(r)) v += c;
    }
    shifted.push_back(std::move(s));
  }

  fed::InferenceOptions options;
  options.embedding_override = &canonical;
  options.co_override = [&](std::size_t d, const Matrix &emb, std::span<const data::SampleId>) {
    Matrix out(emb.rows(), shifted[d].cols());
    for (std::size_t r = 0; r < emb.rows(); ++r) {
      const auto it = row_of.find(key(emb.row(r)));
      if (it == row_of.end()) throw Error(ErrorCode::kInvalidInput, "ideal CO received an unknown embedding");
      std::copy(shifted[d].row(it->second).begin(), shifted[d].row(it->second).end(), out.row(r).begin());
    }
    return out;
  };

  EquivalenceResult result;
  result.samples = n;
  fed::CommMeter meter;
  for (std::size_t origin = 0; origin < k; ++origin) {
    const auto ce_fi = fed::federated_infer(origin, ids, devices, meter, options);
    for (ens::Rule rule : rules) {
      const auto a = ens::apply_batch(rule, ce_fi.logits, test.labels(), seed);
      const auto b = ens::apply_batch(rule, solo, test.labels(), seed);
      std::size_t same = 0;
      for (std::size_t r = 0; r < n; ++r) same += a[r].label == b[r].label ? 1 : 0;
      result.match[rule].push_back(n == 0 ? 1.0 : static_cast<double>(same) / static_cast<double>(n));
    }
  }
  return result;
}

void EpsilonConfig::validate() const {
  if (!(epsilon > 0.0)) throw Error(ErrorCode::kInvalidConfig, "epsilon must be > 0");
  if (!(lambda > 0.0)) throw Error(ErrorCode::kInvalidConfig, "lambda must be > 0");
}

std::vector<double> co_forward_exact(const zoo::CoWeights &w, std::span<const double> z) {
  const Matrix &w1 = w.first->weight().value, &b1 = w.first->bias().value;
  const Matrix &w2 = w.second->weight().value, &b2 = w.second->bias().value;
  if (z.size() != w1.rows()) throw Error(ErrorCode::kShapeError, "co_forward_exact: input width");
  std::vector<double> h(w1.cols()), out(w2.cols());
  for (std::size_t j = 0; j < w1.cols(); ++j) {
    double s = b1(0, j);
    for (std::size_t i = 0; i < z.size(); ++i) s += z[i] * static_cast<double>(w1(i, j));
    h[j] = std::max(0.0, s);
  }
  for (std::size_t j = 0; j < w2.cols(); ++j) {
    double s = b2(0, j);
    for (std::size_t i = 0; i < h.size(); ++i) s += h[i] * static_cast<double>(w2(i, j));
    out[j] = s;
  }
  return out;
}

EpsilonResult verify_epsilon_bound(const nn::Sequential &co, const Matrix &points, const EpsilonConfig &cfg) {
  cfg.validate();
  if (points.rows() == 0) throw Error(ErrorCode::kInvalidInput, "no points to perturb");
  const auto w = zoo::co_weights(co);
  EpsilonResult result;
  result.lipschitz = spectral_norm(w.first->weight().value).value * spectral_norm(w.second->weight().value).value;
  result.bound = result.lipschitz * cfg.lambda * cfg.epsilon;
  const std::size_t dim = points.cols();
  Rng rng(mix_seed(cfg.seed, 0xe5));
  std::vector<double> z(dim), zp(dim), delta(dim);
  for (std::size_t s = 0; s < cfg.samples; ++s) {
    const auto row = points.row(s % points.rows());
    double norm = 0.0;
    for (double &v : delta) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    // Even samples sit on the sphere, odd ones uniformly inside the ball.
    const double radius =
        s % 2 == 0 ? cfg.epsilon : cfg.epsilon * std::pow(rng.uniform(), 1.0 / static_cast<double>(dim));
    double delta_norm = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      delta[i] *= radius / norm;
      z[i] = row[i];
      zp[i] = z[i] + delta[i];
      delta_norm += delta[i] * delta[i];
    }
    delta_norm = std::sqrt(delta_norm);
    const auto m = co_forward_exact(w, z), mp = co_forward_exact(w, zp);
    const auto p = softmax(m), pp = softmax(mp);
    double dev = 0.0, logit_dev = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      dev += (p[j] - pp[j]) * (p[j] - pp[j]);
      logit_dev += (m[j] - mp[j]) * (m[j] - mp[j]);
    }
    dev = std::sqrt(dev);
    logit_dev = std::sqrt(logit_dev);
    ++result.samples;
    result.max_deviation = std::max(result.max_deviation, dev);
    if (dev > result.bound) ++result.violations;
    if (logit_dev > result.lipschitz * delta_norm * (1.0 + 1e-12)) ++result.logit_violations;
    std::vector<double> sorted = p;
    std::partial_sort(sorted.begin(), sorted.begin() + std::min<std::ptrdiff_t>(2, static_cast<std::ptrdiff_t>(sorted.size())),
                      sorted.end(), std::greater<>());
    const double gap = sorted.size() > 1 ? sorted[0] - sorted[1] : 1.0;
    if (gap > 2.0 * result.bound) {
      ++result.margin_cases;
      if (argmax(p) != argmax(pp)) ++result.margin_flips;
    }
  }
  return result;
}

// ------------------------------------------------------------- Bottleneck

BottleneckResult run_bottleneck_suite(System &system, const ExperimentConfig &cfg, ens::Rule rule) {
  auto &devices = system.devices;
  const auto &shared = system.split.shared.ids();
  const auto &test = system.task.test;
  fed::FederationConfig fc = cfg.fed;
  fc.seed = mix_seed(cfg.seed, 0x5);
  fed::CommMeter meter;

  const Matrix unified_shared = fed::idealize_consensus(devices, shared);
  const Matrix unified_test = fed::idealize_consensus(devices, test.ids());
  std::vector<std::vector<std::size_t>> in_distribution;
  for (const auto &d : devices) in_distribution.push_back(fed::exclude_ood_for_co(d, system.split.shared_oracle_labels));

  const auto variant = [&](bool unify, bool exclude) {
    for (std::size_t k = 0; k < devices.size(); ++k) {
      devices[k].co = system.co_init[k];
      fed::CoOptions options;
      if (unify) options.embedding_override = &unified_shared;
      if (exclude) options.rows = in_distribution[k];
      fed::train_co_local(devices[k], shared, fc, meter, options);
    }
    return run_ce_fi(devices, test, {rule}, meter, cfg.seed, unify ? &unified_test : nullptr).at(rule);
  };

  BottleneckResult out;
  out.unified = variant(true, false);
  out.ood_excluded = variant(false, true);
  out.both = variant(true, true);
  out.baseline = variant(false, false);
  return out;
}

// ------------------------------------------------------------------- Cell

CellResult evaluate_cell(const System &system, const ExperimentConfig &cfg) {
  CellResult cell;
  cell.scheme = std::string(data::to_string(cfg.task.scheme));
  cell.alpha = cfg.task.scheme == data::PartitionScheme::kDirichlet ? cfg.task.alpha : 0.0;
  cell.seed = cfg.seed;
  const auto &test = system.task.test;
  cell.solo = run_solo_baseline(system.devices, test);
  fed::CommMeter meter;
  cell.ce_fi = run_ce_fi(system.devices, test, cfg.rules, meter, cfg.seed);
  const std::uint64_t inferences = system.devices.size() * test.size();
  cell.inference_bytes_per_sample = inferences == 0 ? 0 : meter.bytes(fed::Phase::kInference) / inferences;
  cell.input_sharing = run_input_sharing_fi(system.devices, test, ens::Rule::kSoftVote, cfg.seed);
  if (cfg.edge_ensemble && system.raw) {
    const auto edge = train_edge_ensemble(system, cfg);
    cell.edge_ensemble = run_edge_ensemble(edge.head, edge.tails, test, ens::Rule::kSoftVote, cfg.seed);
  }
  return cell;
}

CellResult run_cell(const ExperimentConfig &cfg) {
  System sys = build_system(cfg);
  fed::CommMeter meter;
  const auto tails = pretrain_tails(sys, cfg);
  const auto ce = train_ce(sys, cfg, meter);
  const auto co = train_co(sys, cfg, meter);
  CellResult cell = evaluate_cell(sys, cfg);
  cell.tails = tails;
  cell.ce = ce;
  cell.co = co;
  cell.ce_bytes = meter.bytes(fed::Phase::kCeTraining);
  return cell;
}

// ----------------------------------------------------------------- Report

const char *const kResultsHeader = "config_hash,scheme,seed,method,rule,origin_device,accuracy";
const char *const kSummaryHeader = "config_hash,scheme,method,rule,seeds,mean,std";

std::vector<ResultRow> to_rows(const CellResult &cell) {
  std::string scheme = cell.scheme;
  if (cell.scheme == "dirichlet") {
    std::ostringstream s;
    s << "dirichlet_" << cell.alpha;
    scheme = s.str();
  }
  std::vector<ResultRow> rows;
  for (std::size_t k = 0; k < cell.solo.size(); ++k) {
    rows.push_back({scheme, cell.seed, "solo", "none", static_cast<int>(k), cell.solo[k]});
  }
  for (const auto &[rule, per_origin] : cell.ce_fi) {
    for (std::size_t k = 0; k < per_origin.size(); ++k) {
      rows.push_back({scheme, cell.seed, "ce_fi", std::string(ens::to_string(rule)), static_cast<int>(k), per_origin[k]});
    }
  }
  rows.push_back({scheme, cell.seed, "input_sharing_fi", "soft_vote", -1, cell.input_sharing});
  if (cell.edge_ensemble) rows.push_back({scheme, cell.seed, "edge_ensemble", "soft_vote", -1, *cell.edge_ensemble});
  return rows;
}

std::vector<SummaryRow> summarize(const std::vector<ResultRow> &rows) {
  // (scheme, method, rule) -> seed -> accuracies over origins, in first-seen order.
  std::vector<std::tuple<std::string, std::string, std::string>> keys;
  std::map<std::tuple<std::string, std::string, std::string>, std::map<std::uint64_t, std::vector<double>>> groups;
  for (const auto &r : rows) {
    auto key = std::make_tuple(r.scheme, r.method, r.rule);
    if (!groups.count(key)) keys.push_back(key);
    groups[key][r.seed].push_back(r.accuracy);
  }
  std::vector<SummaryRow> out;
  for (const auto &key : keys) {
    std::vector<double> per_seed;
    for (const auto &[seed, values] : groups[key]) per_seed.push_back(mean(values));
    out.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), per_seed.size(), mean(per_seed),
                   sample_stddev(per_seed)});
  }
  return out;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::ofstream open_for_write(const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  return out;
}

std::vector<std::string> split_csv(const std::string &line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

}  // namespace

void emit_report(const std::vector<ResultRow> &rows, const std::filesystem::path &dir, const std::string &config_hash) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create " + dir.string() + ": " + ec.message());
  {
    auto out = open_for_write(dir / "results.csv");
    out << kResultsHeader << '\n';
    for (const auto &r : rows) {
      out << config_hash << ',' << r.scheme << ',' << r.seed << ',' << r.method << ',' << r.rule << ',' << r.origin
          << ',' << format_double(r.accuracy) << '\n';
    }
  }
  const auto summary = summarize(rows);
  {
    auto out = open_for_write(dir / "summary.csv");
    out << kSummaryHeader << '\n';
    for (const auto &s : summary) {
      out << config_hash << ',' << s.scheme << ',' << s.method << ',' << s.rule << ',' << s.seeds << ','
          << format_double(s.mean) << ',' << format_double(s.stddev) << '\n';
    }
  }
  {
    auto out = open_for_write(dir / "plot_data.csv");
    out << "# config_hash=" << config_hash << '\n' << "x,y,series\n";
    for (const auto &s : summary) {
      out << s.scheme << ',' << format_double(s.mean) << ',' << s.method << ':' << s.rule << '\n';
    }
  }
}

std::vector<ResultRow> parse_results_csv(const std::filesystem::path &path, std::string *config_hash) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader) {
    throw Error(ErrorCode::kFormatError, "unexpected results header in " + path.string());
  }
  std::vector<ResultRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 7) throw Error(ErrorCode::kFormatError, "bad field count on line " + std::to_string(line_no));
    if (config_hash) {
      if (config_hash->empty()) {
        *config_hash = f[0];
      } else if (*config_hash != f[0]) {
        throw Error(ErrorCode::kFormatError, "mixed config hashes in " + path.string());
      }
    }
    ResultRow r;
    r.scheme = f[1];
    r.method = f[3];
    r.rule = f[4];
    const auto parse = [&](const std::string &s, auto &value) {
      const auto res = std::from_chars(s.data(), s.data() + s.size(), value);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw Error(ErrorCode::kFormatError, "bad number '" + s + "' on line " + std::to_string(line_no));
      }
    };
    parse(f[2], r.seed);
    parse(f[5], r.origin);
    parse(f[6], r.accuracy);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace fedinfer::eval
