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


#include "fedinfer/cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

namespace fedinfer::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join_problems(const std::vector<std::string> &problems) {
  std::string out = std::to_string(problems.size()) + " config problem(s)";
  for (const auto &p : problems) out += "\n  " + p;
  return out;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : Error(ErrorCode::kInvalidConfig, join_problems(problems)), problems_(std::move(problems)) {}

// ----------------------------------------------------------------- Config

json default_config() {
  const eval::ExperimentConfig d;
  const eval::EpsilonConfig eps;
  json rules = json::array();
  for (ens::Rule r : ens::all_rules()) rules.push_back(std::string(ens::to_string(r)));
  return json{
      {"seed", d.seed},
      {"task.kind", "synthetic"},
      {"task.num_classes", d.task.synth.num_classes},
      {"task.input_dim", d.task.synth.input_dim},
      {"task.separation", d.task.synth.separation},
      {"task.stddev", d.task.synth.stddev},
      {"task.train_per_class", d.task.synth.train_per_class},
      {"task.test_per_class", d.task.synth.test_per_class},
      {"task.train_files", json::array()},
      {"task.test_files", json::array()},
      {"data.shared_fraction", d.task.shared_fraction},
      {"partition.scheme", std::string(data::to_string(d.task.scheme))},
      {"partition.alpha", d.task.alpha},
      {"partition.num_devices", d.task.num_devices},
      {"arch.head_dim", d.arch.head_dim},
      {"arch.tail_hidden", d.arch.tail_hidden},
      {"arch.tail_dropout", d.arch.tail_dropout},
      {"arch.ce_hidden", d.arch.ce_hidden},
      {"arch.ce_dropout", d.arch.ce_dropout},
      {"arch.co_hidden", d.arch.co_hidden},
      {"arch.co_dropout", d.arch.co_dropout},
      {"arch.embed_dim", d.arch.embed_dim},
      {"tail.batch_size", d.tail_loop.batch_size},
      {"tail.epochs", d.tail_loop.max_epochs},
      {"tail.patience", d.tail_loop.early_stop_patience},
      {"tail.validation_fraction", d.tail_loop.validation_fraction},
      {"ce.epochs", d.fed.ce_epochs},
      {"ce.batch_size", d.fed.ce_batch},
      {"ce.patience", d.fed.ce_patience},
      {"ce.min_delta", d.fed.ce_min_delta},
      {"ce.tau", d.fed.contrastive.tau},
      {"ce.include_positive", d.fed.contrastive.denominator_includes_positive},
      {"ce.stop_gradient", d.fed.contrastive.stop_gradient_centroid},
      {"ce.aggregator", "round_robin"},
      {"ce.fixed_aggregator", d.fed.fixed_aggregator},
      {"ce.max_retries", d.fed.max_round_retries},
      {"co.epochs", d.fed.co_epochs},
      {"co.batch_size", d.fed.co_batch},
      {"co.temperature", d.fed.distill.temperature},
      {"optim.learning_rate", d.fed.adam.learning_rate},
      {"optim.min_learning_rate", d.fed.adam.min_learning_rate},
      {"optim.weight_decay", d.fed.adam.weight_decay},
      {"optim.beta1", d.fed.adam.beta1},
      {"optim.beta2", d.fed.adam.beta2},
      {"optim.epsilon", d.fed.adam.epsilon},
      {"exec.threaded", false},
      {"eval.rules", rules},
      {"eval.edge_ensemble", d.edge_ensemble},
      {"eval.epsilon", eps.epsilon},
      {"eval.lambda", eps.lambda},
      {"eval.epsilon_samples", eps.samples},
      {"eval.shift_scale", 5.0},
  };
}

namespace {

bool same_type(const json &expected, const json &value) {
  if (expected.is_number_unsigned()) {
    return value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
  }
  if (expected.is_number()) return value.is_number();
  if (expected.is_array()) {
    return value.is_array() && std::all_of(value.begin(), value.end(), [](const json &v) { return v.is_string(); });
  }
  return expected.type() == value.type();
}

std::string type_name(const json &expected) {
  if (expected.is_number_unsigned()) return "a non-negative integer";
  if (expected.is_number()) return "a number";
  if (expected.is_boolean()) return "a boolean";
  if (expected.is_array()) return "a list of strings";
  return "a string";
}

// Range checks over a type-correct flat config.
class Checker {
 public:
  Checker(const json &cfg, std::vector<std::string> &problems) : cfg_(cfg), problems_(problems) {}

  std::size_t count(const char *key, std::size_t min) {
    const auto v = cfg_.at(key).get<std::uint64_t>();
    if (v < min) fail(key, "must be >= " + std::to_string(min));
    return static_cast<std::size_t>(v);
  }
  double positive(const char *key) {
    const double v = cfg_.at(key).get<double>();
    if (!(v > 0.0) || !std::isfinite(v)) fail(key, "must be a finite number > 0");
    return v;
  }
  double non_negative(const char *key) {
    const double v = cfg_.at(key).get<double>();
    if (!(v >= 0.0) || !std::isfinite(v)) fail(key, "must be a finite number >= 0");
    return v;
  }
  // lo <= v < hi, or lo < v < hi when open_low.
  double interval(const char *key, double lo, double hi, bool open_low) {
    const double v = cfg_.at(key).get<double>();
    if (!(open_low ? v > lo : v >= lo) || !(v < hi)) {
      fail(key, "must be in " + std::string(open_low ? "(" : "[") + fmt(lo) + ", " + fmt(hi) + ")");
    }
    return v;
  }
  bool flag(const char *key) { return cfg_.at(key).get<bool>(); }
  std::string text(const char *key) { return cfg_.at(key).get<std::string>(); }
  std::vector<std::string> list(const char *key) { return cfg_.at(key).get<std::vector<std::string>>(); }
  void fail(const std::string &key, const std::string &why) { problems_.push_back(key + ": " + why); }

 private:
  static std::string fmt(double x) {
    std::ostringstream s;
    s << x;
    return s.str();
  }
  const json &cfg_;
  std::vector<std::string> &problems_;
};

std::vector<ens::Rule> parse_rules(const std::vector<std::string> &names, const std::string &key,
                                   Checker &check) {
  std::vector<ens::Rule> rules;
  if (names.empty()) check.fail(key, "needs at least one rule");
  for (const auto &name : names) {
    try {
      const ens::Rule r = ens::parse_rule(name);
      if (std::find(rules.begin(), rules.end(), r) == rules.end()) rules.push_back(r);
    } catch (const Error &) {
      check.fail(key, "unknown rule '" + name + "'");
    }
  }
  return rules;
}

}  // namespace

RunConfig resolve_config(const json &user, std::optional<std::uint64_t> seed_override,
                         const std::vector<std::string> &rule_override, const fs::path &base_dir) {
  std::vector<std::string> problems;
  if (!user.is_object()) throw ConfigError({"config must be a JSON object of dotted keys"});

  json cfg = default_config();
  for (const auto &[key, value] : user.items()) {
    const auto it = cfg.find(key);
    if (it == cfg.end()) {
      problems.push_back(key + ": unknown key");
    } else if (!same_type(*it, value)) {
      problems.push_back(key + ": expected " + type_name(*it));
    } else if (it->is_number_unsigned()) {
      *it = value.get<std::uint64_t>();
    } else {
      *it = value;
    }
  }
  if (seed_override) cfg["seed"] = *seed_override;
  if (!rule_override.empty()) cfg["eval.rules"] = rule_override;

  RunConfig run;
  Checker check(cfg, problems);
  auto &e = run.experiment;
  e.seed = cfg.at("seed").get<std::uint64_t>();

  run.task_kind = check.text("task.kind");
  if (run.task_kind != "synthetic" && run.task_kind != "feature_files") {
    check.fail("task.kind", "must be synthetic or feature_files");
  }
  auto &synth = e.task.synth;
  synth.num_classes = check.count("task.num_classes", 2);
  synth.input_dim = check.count("task.input_dim", 1);
  synth.separation = check.positive("task.separation");
  synth.stddev = check.positive("task.stddev");
  synth.train_per_class = check.count("task.train_per_class", 1);
  synth.test_per_class = check.count("task.test_per_class", 1);
  e.task.shared_fraction = check.interval("data.shared_fraction", 0.0, 1.0, true);
  try {
    e.task.scheme = data::parse_partition_scheme(check.text("partition.scheme"));
  } catch (const Error &) {
    check.fail("partition.scheme", "must be mild, moderate, skewed, disjoint or dirichlet");
  }
  e.task.alpha = check.positive("partition.alpha");
  e.task.num_devices = check.count("partition.num_devices", 2);

  const auto train_files = check.list("task.train_files");
  const auto test_files = check.list("task.test_files");
  if (run.task_kind == "feature_files") {
    if (train_files.size() != e.task.num_devices) {
      check.fail("task.train_files", "needs one file per device (" + std::to_string(e.task.num_devices) + ")");
    }
    if (test_files.size() != e.task.num_devices) {
      check.fail("task.test_files", "needs one file per device (" + std::to_string(e.task.num_devices) + ")");
    }
    for (const auto &f : train_files) run.train_files.push_back(base_dir / f);
    for (const auto &f : test_files) run.test_files.push_back(base_dir / f);
    for (const auto &f : run.train_files) {
      if (!fs::is_regular_file(f)) check.fail("task.train_files", "no such file " + f.string());
    }
    for (const auto &f : run.test_files) {
      if (!fs::is_regular_file(f)) check.fail("task.test_files", "no such file " + f.string());
    }
  } else if (!train_files.empty() || !test_files.empty()) {
    check.fail("task.train_files", "only used with task.kind feature_files");
  }

  auto &arch = e.arch;
  arch.head_dim = check.count("arch.head_dim", 1);
  arch.tail_hidden = check.count("arch.tail_hidden", 1);
  arch.tail_dropout = check.interval("arch.tail_dropout", 0.0, 1.0, false);
  arch.ce_hidden = check.count("arch.ce_hidden", 1);
  arch.ce_dropout = check.interval("arch.ce_dropout", 0.0, 1.0, false);
  arch.co_hidden = check.count("arch.co_hidden", 1);
  arch.co_dropout = check.interval("arch.co_dropout", 0.0, 1.0, false);
  arch.embed_dim = check.count("arch.embed_dim", 1);

  e.tail_loop.batch_size = check.count("tail.batch_size", 1);
  e.tail_loop.max_epochs = check.count("tail.epochs", 1);
  e.tail_loop.early_stop_patience = check.count("tail.patience", 1);
  e.tail_loop.validation_fraction = check.interval("tail.validation_fraction", 0.0, 1.0, true);

  auto &fed = e.fed;
  fed.ce_epochs = check.count("ce.epochs", 1);
  fed.ce_batch = check.count("ce.batch_size", 2);
  fed.ce_patience = check.count("ce.patience", 1);
  fed.ce_min_delta = check.non_negative("ce.min_delta");
  fed.contrastive.tau = check.positive("ce.tau");
  fed.contrastive.denominator_includes_positive = check.flag("ce.include_positive");
  fed.contrastive.stop_gradient_centroid = check.flag("ce.stop_gradient");
  const auto aggregator = check.text("ce.aggregator");
  if (aggregator == "round_robin") {
    fed.aggregator = fed::AggregatorPolicy::kRoundRobin;
  } else if (aggregator == "fixed") {
    fed.aggregator = fed::AggregatorPolicy::kFixed;
  } else {
    check.fail("ce.aggregator", "must be round_robin or fixed");
  }
  fed.fixed_aggregator = check.count("ce.fixed_aggregator", 0);
  if (fed.fixed_aggregator >= e.task.num_devices) check.fail("ce.fixed_aggregator", "must name an existing device");
  fed.max_round_retries = check.count("ce.max_retries", 0);
  fed.co_epochs = check.count("co.epochs", 1);
  fed.co_batch = check.count("co.batch_size", 1);
  fed.distill.temperature = check.positive("co.temperature");

  fed.adam.learning_rate = check.positive("optim.learning_rate");
  fed.adam.min_learning_rate = check.non_negative("optim.min_learning_rate");
  if (fed.adam.min_learning_rate > fed.adam.learning_rate) {
    check.fail("optim.min_learning_rate", "must not exceed optim.learning_rate");
  }
  fed.adam.weight_decay = check.non_negative("optim.weight_decay");
  fed.adam.beta1 = check.interval("optim.beta1", 0.0, 1.0, false);
  fed.adam.beta2 = check.interval("optim.beta2", 0.0, 1.0, false);
  fed.adam.epsilon = check.positive("optim.epsilon");

  fed.mode = check.flag("exec.threaded") ? fed::ExecutionMode::kThreaded : fed::ExecutionMode::kSingleThreaded;

  e.rules = parse_rules(check.list("eval.rules"), rule_override.empty() ? "eval.rules" : "--rule", check);
  e.edge_ensemble = check.flag("eval.edge_ensemble") && run.task_kind == "synthetic";
  run.epsilon.epsilon = check.positive("eval.epsilon");
  run.epsilon.lambda = check.positive("eval.lambda");
  run.epsilon.samples = check.count("eval.epsilon_samples", 1);
  run.shift_scale = check.non_negative("eval.shift_scale");

  if (problems.empty()) {
    try {
      e.validate();
      run.epsilon.validate();
    } catch (const Error &err) {
      problems.push_back(err.what());
    }
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
  run.resolved = std::move(cfg);
  run.hash = config_hash(run.resolved);
  return run;
}

RunConfig load_config(const fs::path &path, std::optional<std::uint64_t> seed_override,
                      const std::vector<std::string> &rule_override) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError({path.string() + ": cannot open config"});
  json user;
  try {
    user = json::parse(in);
  } catch (const json::parse_error &e) {
    throw ConfigError({path.string() + ": " + e.what()});
  }
  return resolve_config(user, seed_override, rule_override, path.parent_path());
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::kInvalidInput, "sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 0xf];
  }
  return out;
}

std::string config_hash(const json &resolved) {
  json hashed = json::object();
  for (const auto &[key, value] : resolved.items()) {
    if (key.starts_with("eval.") || key.starts_with("exec.")) continue;
    hashed[key] = value;
  }
  return sha256_hex(hashed.dump()).substr(0, 16);
}

// -------------------------------------------------------------- Artifacts

namespace {

std::string read_bytes(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Writes through a temporary file so a failed stage never leaves a truncated artifact.
void write_bytes(const fs::path &path, std::string_view bytes) {
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::kIoError, "write failed for " + path.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot move " + tmp.string() + ": " + ec.message());
}

void write_json(const fs::path &path, const json &j) { write_bytes(path, j.dump(2) + "\n"); }

void require_exists(const fs::path &path) {
  if (!fs::exists(path)) throw Error(ErrorCode::kStageDependency, "missing artifact " + path.string());
}

void require_hash(const fs::path &path, const std::string &found, const std::string &expected) {
  if (found != expected) {
    throw Error(ErrorCode::kStageDependency,
                path.string() + " belongs to config " + found + ", current config is " + expected);
  }
}

json read_artifact(const fs::path &path, const std::string &hash) {
  require_exists(path);
  json j;
  try {
    j = json::parse(read_bytes(path));
  } catch (const json::parse_error &e) {
    throw Error(ErrorCode::kFormatError, path.string() + ": " + e.what());
  }
  require_hash(path, j.value("config_hash", std::string()), hash);
  return j;
}

fs::path manifest_path(const fs::path &out) { return out / "data" / "manifest.json"; }
fs::path partition_path(const fs::path &out) { return out / "partition.json"; }
fs::path model_path(const fs::path &out, std::string_view stage, std::size_t device) {
  return out / "models" / stage / ("device_" + std::to_string(device) + ".ckpt");
}
fs::path stage_report_path(const fs::path &out, Stage stage) {
  return out / "stages" / (std::string(to_string(stage)) + ".json");
}

std::vector<int> to_int_labels(const std::vector<std::uint32_t> &labels) { return {labels.begin(), labels.end()}; }

data::Dataset file_dataset(const data::FeatureFile &file, std::size_t num_classes, const fs::path &path) {
  if (!file.labels) throw Error(ErrorCode::kInvalidInput, path.string() + ": feature file has no labels");
  return data::Dataset(file.ids, to_int_labels(*file.labels), num_classes);
}

data::FeatureFile to_file(const data::FeatureTable &table, const data::Dataset &set) {
  data::FeatureFile f;
  f.features = table.lookup(set.ids());
  f.ids = set.ids();
  std::vector<std::uint32_t> labels(set.labels().begin(), set.labels().end());
  f.labels = std::move(labels);
  return f;
}

std::shared_ptr<const data::FeatureTable> concat_table(const data::FeatureFile &a, const data::FeatureFile &b) {
  if (a.features.cols() != b.features.cols()) throw Error(ErrorCode::kShapeError, "train/test feature widths differ");
  std::vector<data::SampleId> ids = a.ids;
  ids.insert(ids.end(), b.ids.begin(), b.ids.end());
  std::vector<float> values(a.features.values().begin(), a.features.values().end());
  values.insert(values.end(), b.features.values().begin(), b.features.values().end());
  return std::make_shared<const data::FeatureTable>(
      std::move(ids), Matrix(a.features.rows() + b.features.rows(), a.features.cols(), std::move(values)));
}

// Same ids with the same labels, in any order.
void require_aligned(const data::Dataset &reference, const data::Dataset &other, const fs::path &path) {
  std::unordered_map<data::SampleId, int> label_of;
  for (std::size_t i = 0; i < reference.size(); ++i) label_of[reference.ids()[i]] = reference.labels()[i];
  if (other.size() != reference.size()) {
    throw Error(ErrorCode::kInvalidInput, path.string() + ": sample count differs from the first device's file");
  }
  for (std::size_t i = 0; i < other.size(); ++i) {
    const auto it = label_of.find(other.ids()[i]);
    if (it == label_of.end() || it->second != other.labels()[i]) {
      throw Error(ErrorCode::kInvalidInput,
                  path.string() + ": sample " + std::to_string(other.ids()[i]) + " is not aligned with the first device");
    }
  }
}

struct TaskData {
  data::SyntheticTask task;
  std::vector<std::shared_ptr<const data::FeatureTable>> device_tables;
};

// Files in manifest order: train then test for synthetic data, all train files then all test files otherwise.
TaskData assemble_task(const RunConfig &cfg, const std::vector<data::FeatureFile> &files,
                       const std::vector<fs::path> &paths) {
  const std::size_t classes = cfg.experiment.task.synth.num_classes;
  TaskData td;
  if (cfg.task_kind == "synthetic") {
    if (files.size() != 2) throw Error(ErrorCode::kFormatError, "manifest must list train and test files");
    td.task.train = file_dataset(files[0], classes, paths[0]);
    td.task.test = file_dataset(files[1], classes, paths[1]);
    td.task.inputs = *concat_table(files[0], files[1]);
    return td;
  }
  const std::size_t k = cfg.experiment.task.num_devices;
  if (files.size() != 2 * k) throw Error(ErrorCode::kFormatError, "manifest must list train and test files per device");
  td.task.train = file_dataset(files[0], classes, paths[0]);
  td.task.test = file_dataset(files[k], classes, paths[k]);
  for (std::size_t d = 0; d < k; ++d) {
    require_aligned(td.task.train, file_dataset(files[d], classes, paths[d]), paths[d]);
    require_aligned(td.task.test, file_dataset(files[k + d], classes, paths[k + d]), paths[k + d]);
    td.device_tables.push_back(concat_table(files[d], files[k + d]));
  }
  return td;
}

TaskData load_task(const RunConfig &cfg, const fs::path &out) {
  const json manifest = read_artifact(manifest_path(out), cfg.hash);
  std::vector<data::FeatureFile> files;
  std::vector<fs::path> paths;
  for (const auto &entry : manifest.at("files")) {
    fs::path p = entry.at("path").get<std::string>();
    if (p.is_relative()) p = out / p;
    require_exists(p);
    const std::string bytes = read_bytes(p);
    if (sha256_hex(bytes) != entry.at("sha256").get<std::string>()) {
      throw Error(ErrorCode::kStageDependency, p.string() + " changed since synth-data recorded it");
    }
    files.push_back(data::decode_features(bytes));
    paths.push_back(p);
  }
  return assemble_task(cfg, files, paths);
}

json ids_json(const data::Dataset &set) { return json(set.ids()); }

data::Dataset labelled(const std::vector<data::SampleId> &ids, const std::unordered_map<data::SampleId, int> &label_of,
                       std::size_t classes) {
  std::vector<int> labels;
  for (auto id : ids) {
    const auto it = label_of.find(id);
    if (it == label_of.end()) throw Error(ErrorCode::kFormatError, "partition names unknown sample " + std::to_string(id));
    labels.push_back(it->second);
  }
  return data::Dataset(ids, std::move(labels), classes);
}

eval::System load_system(const RunConfig &cfg, const fs::path &out) {
  TaskData td = load_task(cfg, out);
  const json pj = read_artifact(partition_path(out), cfg.hash);
  const std::size_t classes = cfg.experiment.task.synth.num_classes;
  std::unordered_map<data::SampleId, int> label_of;
  for (std::size_t i = 0; i < td.task.train.size(); ++i) label_of[td.task.train.ids()[i]] = td.task.train.labels()[i];

  data::HoldoutSplit split;
  split.local_pool = labelled(pj.at("local_pool").get<std::vector<data::SampleId>>(), label_of, classes);
  const auto shared_ids = pj.at("shared").get<std::vector<data::SampleId>>();
  const auto shared = labelled(shared_ids, label_of, classes);
  split.shared_oracle_labels = shared.labels();
  split.shared = shared.without_labels();

  data::Partition partition;
  partition.spec.scheme = data::parse_partition_scheme(pj.at("scheme").get<std::string>());
  partition.spec.alpha = pj.at("alpha").get<double>();
  partition.spec.num_devices = pj.at("num_devices").get<std::size_t>();
  partition.spec.seed = pj.at("seed").get<std::uint64_t>();
  partition.spec.counts = pj.at("counts").get<std::vector<std::vector<std::size_t>>>();
  for (const auto &ids : pj.at("devices")) {
    partition.devices.push_back(labelled(ids.get<std::vector<data::SampleId>>(), label_of, classes));
  }
  return eval::assemble_system(cfg.experiment, std::move(td.task), std::move(split), std::move(partition),
                               std::move(td.device_tables));
}

void load_models(eval::System &sys, const RunConfig &cfg, const fs::path &out, std::string_view stage) {
  for (auto &d : sys.devices) {
    const fs::path p = model_path(out, stage, d.id);
    require_exists(p);
    const auto ckpt = zoo::read_checkpoint(p);
    require_hash(p, ckpt.config_hash, cfg.hash);
    zoo::load_device_checkpoint(d, ckpt);
  }
}

void save_models(const eval::System &sys, const RunConfig &cfg, const fs::path &out, std::string_view stage) {
  for (const auto &d : sys.devices) {
    write_bytes(model_path(out, stage, d.id), zoo::encode_checkpoint(zoo::device_checkpoint(d, cfg.hash)));
  }
}

// ----------------------------------------------------------------- Stages

void stage_synth_data(const RunConfig &cfg, const fs::path &out) {
  json entries = json::array();
  std::vector<data::FeatureFile> files;
  std::vector<fs::path> paths;
  auto record = [&](const fs::path &path, const std::string &name, const std::string &bytes) {
    files.push_back(data::decode_features(bytes));
    paths.push_back(path);
    entries.push_back({{"path", name}, {"sha256", sha256_hex(bytes)}, {"rows", files.back().features.rows()},
                       {"cols", files.back().features.cols()}});
  };
  if (cfg.task_kind == "synthetic") {
    const auto task = eval::generate_task(cfg.experiment);
    for (const auto &[name, set] : {std::pair{"train", &task.train}, std::pair{"test", &task.test}}) {
      const std::string rel = std::string("data/") + name + ".cefi";
      const std::string bytes = data::encode_features(to_file(task.inputs, *set));
      write_bytes(out / rel, bytes);
      record(out / rel, rel, bytes);
    }
  } else {
    std::vector<fs::path> all = cfg.train_files;
    all.insert(all.end(), cfg.test_files.begin(), cfg.test_files.end());
    for (const auto &p : all) {
      const auto abs = fs::absolute(p).lexically_normal();
      record(abs, abs.string(), read_bytes(abs));
    }
  }
  // Bad or misaligned inputs fail here, before the manifest vouches for them.
  (void)assemble_task(cfg, files, paths);
  write_json(manifest_path(out), {{"config_hash", cfg.hash}, {"kind", cfg.task_kind}, {"files", entries}});
}

void stage_partition(const RunConfig &cfg, const fs::path &out) {
  const TaskData td = load_task(cfg, out);
  const auto split = eval::split_shared(cfg.experiment, td.task.train);
  const auto partition = eval::partition_local(cfg.experiment, split.local_pool);
  json devices = json::array();
  for (const auto &d : partition.devices) devices.push_back(ids_json(d));
  write_json(partition_path(out), {{"config_hash", cfg.hash},
                                   {"scheme", std::string(data::to_string(partition.spec.scheme))},
                                   {"alpha", partition.spec.alpha},
                                   {"num_devices", partition.spec.num_devices},
                                   {"seed", partition.spec.seed},
                                   {"counts", partition.spec.counts},
                                   {"shared", ids_json(split.shared)},
                                   {"local_pool", ids_json(split.local_pool)},
                                   {"devices", devices}});
}

void stage_pretrain_tails(const RunConfig &cfg, const fs::path &out) {
  auto sys = load_system(cfg, out);
  const auto reports = eval::pretrain_tails(sys, cfg.experiment);
  save_models(sys, cfg, out, "tails");
  json rows = json::array();
  for (const auto &r : reports) {
    rows.push_back({{"epochs_run", r.epochs_run}, {"best_epoch", r.best_epoch},
                    {"best_validation_loss", r.best_validation_loss}});
  }
  write_json(stage_report_path(out, Stage::kPretrainTails), {{"config_hash", cfg.hash}, {"devices", rows}});
}

void stage_train_ce(const RunConfig &cfg, const fs::path &out) {
  auto sys = load_system(cfg, out);
  load_models(sys, cfg, out, "tails");
  fed::CommMeter meter;
  const auto report = eval::train_ce(sys, cfg.experiment, meter);
  save_models(sys, cfg, out, "ce");
  std::ostringstream trace;
  trace << "# config_hash=" << cfg.hash << "\n";
  meter.write_trace(trace);
  write_bytes(out / "ce_trace.txt", trace.str());
  write_json(stage_report_path(out, Stage::kTrainCe),
             {{"config_hash", cfg.hash},
              {"epoch_loss", report.epoch_loss},
              {"rounds", report.rounds},
              {"aborted_rounds", report.aborted_rounds},
              {"early_stopped", report.early_stopped},
              {"bytes", meter.bytes(fed::Phase::kCeTraining)},
              {"epoch_bytes", meter.ce_epoch_bytes()},
              {"closed_form_epoch_bytes",
               fed::ce_bytes_per_epoch(sys.devices.size(), sys.split.shared.size(), cfg.experiment.arch.embed_dim)}});
}

void stage_train_co(const RunConfig &cfg, const fs::path &out) {
  auto sys = load_system(cfg, out);
  load_models(sys, cfg, out, "ce");
  fed::CommMeter meter;
  const auto reports = eval::train_co(sys, cfg.experiment, meter);
  save_models(sys, cfg, out, "co");
  json rows = json::array();
  for (const auto &r : reports) {
    rows.push_back({{"initial_loss", r.initial_loss}, {"final_loss", r.final_loss}, {"samples", r.samples}});
  }
  write_json(stage_report_path(out, Stage::kTrainCo),
             {{"config_hash", cfg.hash}, {"devices", rows}, {"bytes", meter.bytes(fed::Phase::kCoTraining)}});
}

eval::System trained_system(const RunConfig &cfg, const fs::path &out) {
  auto sys = load_system(cfg, out);
  load_models(sys, cfg, out, "co");
  return sys;
}

void stage_infer(const RunConfig &cfg, const fs::path &out) {
  const auto sys = trained_system(cfg, out);
  const auto &test = sys.task.test;
  fed::CommMeter meter;
  std::string csv = "config_hash,origin_device,rule,sample_id,true_label,predicted_label,selected_device\n";
  for (std::size_t origin = 0; origin < sys.devices.size(); ++origin) {
    const auto result = fed::federated_infer(origin, test.ids(), sys.devices, meter);
    for (ens::Rule rule : cfg.experiment.rules) {
      const auto decisions = ens::apply_batch(rule, result.logits, test.labels(), cfg.experiment.seed);
      for (std::size_t i = 0; i < decisions.size(); ++i) {
        csv += cfg.hash + "," + std::to_string(origin) + "," + std::string(ens::to_string(rule)) + "," +
               std::to_string(test.ids()[i]) + "," + std::to_string(test.labels()[i]) + "," +
               std::to_string(decisions[i].label) + "," +
               (decisions[i].device ? std::to_string(*decisions[i].device) : std::string()) + "\n";
      }
    }
  }
  write_bytes(out / "predictions.csv", csv);
  const std::uint64_t inferences = sys.devices.size() * test.size();
  write_json(stage_report_path(out, Stage::kInfer),
             {{"config_hash", cfg.hash},
              {"bytes", meter.bytes(fed::Phase::kInference)},
              {"bytes_per_sample", inferences == 0 ? 0 : meter.bytes(fed::Phase::kInference) / inferences}});
}

void stage_evaluate(const RunConfig &cfg, const fs::path &out) {
  const auto sys = trained_system(cfg, out);
  const auto cell = eval::evaluate_cell(sys, cfg.experiment);
  eval::emit_report(eval::to_rows(cell), out, cfg.hash);
}

void stage_theory_check(const RunConfig &cfg, const fs::path &out) {
  const auto sys = trained_system(cfg, out);
  const auto &test = sys.task.test;
  const std::uint64_t seed = cfg.experiment.seed;
  const std::vector<ens::Rule> rules = {ens::Rule::kSoftVote,   ens::Rule::kHardVote,   ens::Rule::kLogitsAvg,
                                        ens::Rule::kMaxSoftmax, ens::Rule::kMinEntropy, ens::Rule::kMinEnergy};
  const auto eq = eval::verify_fi_equivalence(sys.devices, test, rules, cfg.shift_scale, mix_seed(seed, 0xe1));
  json equivalence = json::object();
  for (const auto &[rule, per_origin] : eq.match) equivalence[std::string(ens::to_string(rule))] = per_origin;

  json bounds = json::array();
  for (const auto &d : sys.devices) {
    eval::EpsilonConfig ec = cfg.epsilon;
    ec.seed = mix_seed(seed, 0xe6 + d.id);
    const Matrix points = zoo::embed(d, d.features(test.ids()));
    const auto r = eval::verify_epsilon_bound(d.co, points, ec);
    bounds.push_back({{"device", d.id},
                      {"lipschitz", r.lipschitz},
                      {"bound", r.bound},
                      {"max_deviation", r.max_deviation},
                      {"samples", r.samples},
                      {"violations", r.violations},
                      {"margin_cases", r.margin_cases},
                      {"margin_flips", r.margin_flips}});
  }
  const auto &arch = cfg.experiment.arch;
  const std::size_t k = sys.devices.size(), classes = cfg.experiment.task.synth.num_classes;
  write_json(out / "theory.json",
             {{"config_hash", cfg.hash},
              {"equivalence", {{"samples", eq.samples}, {"shift_scale", cfg.shift_scale}, {"match", equivalence}}},
              {"epsilon", {{"epsilon", cfg.epsilon.epsilon}, {"lambda", cfg.epsilon.lambda}, {"devices", bounds}}},
              {"communication",
               {{"inference_bytes_per_sample", fed::inference_bytes_per_sample(k, arch.embed_dim, classes)},
                {"ce_bytes_per_epoch", fed::ce_bytes_per_epoch(k, sys.split.shared.size(), arch.embed_dim)}}}});
}

}  // namespace

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::kSynthData: return "synth-data";
    case Stage::kPartition: return "partition";
    case Stage::kPretrainTails: return "pretrain-tails";
    case Stage::kTrainCe: return "train-ce";
    case Stage::kTrainCo: return "train-co";
    case Stage::kInfer: return "infer";
    case Stage::kEvaluate: return "evaluate";
    case Stage::kTheoryCheck: return "theory-check";
  }
  return "?";
}

const std::vector<Stage> &pipeline_stages() {
  static const std::vector<Stage> kStages = {Stage::kSynthData,  Stage::kPartition, Stage::kPretrainTails,
                                             Stage::kTrainCe,    Stage::kTrainCo,   Stage::kInfer,
                                             Stage::kEvaluate,   Stage::kTheoryCheck};
  return kStages;
}

void run_stage(Stage stage, const RunConfig &cfg, const fs::path &out) {
  write_json(out / "config.resolved.json", json{{"config_hash", cfg.hash}, {"config", cfg.resolved}});
  switch (stage) {
    case Stage::kSynthData: return stage_synth_data(cfg, out);
    case Stage::kPartition: return stage_partition(cfg, out);
    case Stage::kPretrainTails: return stage_pretrain_tails(cfg, out);
    case Stage::kTrainCe: return stage_train_ce(cfg, out);
    case Stage::kTrainCo: return stage_train_co(cfg, out);
    case Stage::kInfer: return stage_infer(cfg, out);
    case Stage::kEvaluate: return stage_evaluate(cfg, out);
    case Stage::kTheoryCheck: return stage_theory_check(cfg, out);
  }
}

void run_report(const std::vector<fs::path> &inputs, const fs::path &out) {
  if (inputs.empty()) throw Error(ErrorCode::kInvalidInput, "report needs at least one input directory");
  std::vector<eval::ResultRow> rows;
  std::set<std::string> hashes;
  json sources = json::array();
  for (const auto &dir : inputs) {
    const fs::path p = dir / "results.csv";
    require_exists(p);
    std::string hash;
    auto part = eval::parse_results_csv(p, &hash);
    rows.insert(rows.end(), part.begin(), part.end());
    hashes.insert(hash);
    sources.push_back({{"dir", dir.string()}, {"config_hash", hash}});
  }
  std::string combined = *hashes.begin();
  if (hashes.size() > 1) {
    std::string joined;
    for (const auto &h : hashes) joined += h + ",";
    combined = sha256_hex(joined).substr(0, 16);
  }
  eval::emit_report(rows, out, combined);
  write_json(out / "report.json", {{"config_hash", combined}, {"inputs", sources}});
}

void run_pipeline(const RunConfig &cfg, const fs::path &out) {
  for (Stage s : pipeline_stages()) run_stage(s, cfg, out);
}

int exit_code_for(const std::exception &e) {
  if (const auto *err = dynamic_cast<const Error *>(&e)) {
    if (err->code() == ErrorCode::kInvalidConfig) return kExitConfig;
    if (err->code() == ErrorCode::kStageDependency) return kExitStageDependency;
  }
  return kExitRuntime;
}

int main(int argc, char **argv) {
  CLI::App app{"Federated inference with consensus embeddings: staged pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> rules;
  std::vector<std::string> inputs;

  auto add_common = [&](CLI::App *sub) {
    sub->add_option("--config", config_path, "Flat JSON config; defaults apply when omitted");
    sub->add_option("--out", out_dir, "Run directory")->required();
    sub->add_option("--seed", seed, "Overrides the config seed");
    sub->add_option("--rule", rules, "Ensemble rule to evaluate (repeatable)");
  };
  std::vector<std::pair<CLI::App *, Stage>> stage_commands;
  for (Stage s : pipeline_stages()) {
    auto *sub = app.add_subcommand(std::string(to_string(s)));
    add_common(sub);
    stage_commands.emplace_back(sub, s);
  }
  auto *run_cmd = app.add_subcommand("run", "Every stage, then a report over the run directory");
  add_common(run_cmd);
  auto *report_cmd = app.add_subcommand("report", "Merge results.csv from run directories");
  report_cmd->add_option("--out", out_dir, "Report directory")->required();
  report_cmd->add_option("--input", inputs, "Run directory to merge (repeatable); defaults to --out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const fs::path out = out_dir;
    if (report_cmd->parsed()) {
      std::vector<fs::path> dirs(inputs.begin(), inputs.end());
      if (dirs.empty()) dirs.push_back(out);
      run_report(dirs, out);
      std::cout << "report: " << (out / "summary.csv").string() << "\n";
      return kExitOk;
    }
    const RunConfig cfg = config_path.empty() ? resolve_config(json::object(), seed, rules)
                                              : load_config(config_path, seed, rules);
    if (run_cmd->parsed()) {
      for (Stage s : pipeline_stages()) {
        run_stage(s, cfg, out);
        std::cout << to_string(s) << ": done [" << cfg.hash << "]\n";
      }
      run_report({out}, out);
      return kExitOk;
    }
    for (const auto &[sub, stage] : stage_commands) {
      if (sub->parsed()) {
        run_stage(stage, cfg, out);
        std::cout << to_string(stage) << ": done [" << cfg.hash << "]\n";
      }
    }
    return kExitOk;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace fedinfer::cli
