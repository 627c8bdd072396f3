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

#ifndef FEDINFER_ERROR_HPP_
#define FEDINFER_ERROR_HPP_

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fedinfer {

enum class ErrorCode {
  kInvalidInput,
  kDegenerateVector,
  kShapeError,
  kProtocolError,
  kInvalidBatch,
  kInvalidLabel,
  kInvalidConfig,
  kLabelUnavailable,
  kPartitionFailed,
  kFormatError,
  kRoundAborted,
  kMissingOracleLabel,
  kIoError,
  kStageDependency,
};

std::string_view to_string(ErrorCode code);

// Every failure in the library surfaces as this exception; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string &what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  // Format errors carry the byte offset at which parsing failed.
  Error(ErrorCode code, const std::string &what, std::uint64_t offset)
      : std::runtime_error(std::string(to_string(code)) + " at byte " + std::to_string(offset) +
                           ": " + what),
        code_(code),
        offset_(offset) {}

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::uint64_t> offset() const noexcept { return offset_; }

 private:
  ErrorCode code_;
  std::optional<std::uint64_t> offset_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidInput: return "InvalidInput";
    case ErrorCode::kDegenerateVector: return "DegenerateVector";
    case ErrorCode::kShapeError: return "ShapeError";
    case ErrorCode::kProtocolError: return "ProtocolError";
    case ErrorCode::kInvalidBatch: return "InvalidBatch";
    case ErrorCode::kInvalidLabel: return "InvalidLabel";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kLabelUnavailable: return "LabelUnavailable";
    case ErrorCode::kPartitionFailed: return "PartitionFailed";
    case ErrorCode::kFormatError: return "FormatError";
    case ErrorCode::kRoundAborted: return "RoundAborted";
    case ErrorCode::kMissingOracleLabel: return "MissingOracleLabel";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kStageDependency: return "StageDependencyError";
  }
  return "Unknown";
}

}  // namespace fedinfer

#endif  // FEDINFER_ERROR_HPP_
