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


#ifndef FEDINFER_CLI_HPP_
#define FEDINFER_CLI_HPP_

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedinfer/error.hpp"
#include "fedinfer/evalkit.hpp"

namespace fedinfer::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitStageDependency = 3;
inline constexpr int kExitRuntime = 4;

// Every problem found in a config, reported together.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string> &problems() const noexcept { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct RunConfig {
  eval::ExperimentConfig experiment;
  std::string task_kind = "synthetic";  // synthetic | feature_files
  // One labelled CEFI file per device, ids aligned across devices.
  std::vector<std::filesystem::path> train_files;
  std::vector<std::filesystem::path> test_files;
  eval::EpsilonConfig epsilon;
  double shift_scale = 5.0;
  // Every key with its effective value.
  nlohmann::json resolved;
  std::string hash;
};

// Flat dotted keys with their defaults.
nlohmann::json default_config();

/**
 * Overlays `user` on the defaults and validates the result. Unknown keys,
 * wrong types and out-of-range values all end up in one ConfigError.
 * Relative feature-file paths are taken against `base_dir`.
 */
RunConfig resolve_config(const nlohmann::json &user, std::optional<std::uint64_t> seed_override = std::nullopt,
                         const std::vector<std::string> &rule_override = {},
                         const std::filesystem::path &base_dir = {});
RunConfig load_config(const std::filesystem::path &path, std::optional<std::uint64_t> seed_override = std::nullopt,
                      const std::vector<std::string> &rule_override = {});

// First 16 hex digits of SHA-256 over the sorted resolved config without eval.* and exec.* keys.
std::string config_hash(const nlohmann::json &resolved);
std::string sha256_hex(std::string_view bytes);

enum class Stage { kSynthData, kPartition, kPretrainTails, kTrainCe, kTrainCo, kInfer, kEvaluate, kTheoryCheck };

std::string_view to_string(Stage stage);
const std::vector<Stage> &pipeline_stages();

/**
 * Runs one stage in `out`. Inputs from earlier stages are read from disk;
 * a missing one, or one written under another config hash, is a
 * StageDependency error.
 */
void run_stage(Stage stage, const RunConfig &cfg, const std::filesystem::path &out);

/**
 * Merges results.csv from each input directory into results, summary and
 * plot data in `out`. Inputs under different configs are tagged with a hash
 * of their sorted hashes.
 */
void run_report(const std::vector<std::filesystem::path> &inputs, const std::filesystem::path &out);

// Every stage followed by a report over `out`.
void run_pipeline(const RunConfig &cfg, const std::filesystem::path &out);

int exit_code_for(const std::exception &e);

// Command-line entry point; returns the process exit code.
int main(int argc, char **argv);

}  // namespace fedinfer::cli

#endif  // FEDINFER_CLI_HPP_
