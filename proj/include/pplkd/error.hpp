#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pplkd {

enum class ErrorCode {
  kEmptyCorpus,
  kIoFailure,
  kMalformedRecord,
  kVocabularyMismatch,
  kEmptyResponse,
  kInvalidRuleParameters,
  kTimeout,
  kAuthFailure,
  kRateLimited,
  kProtocolError,
  kUnsupportedEndpoint,
  kParseFailure,
  kBudgetExhausted,
  kBudgetExceeded,
  kEmptyDataset,
  kDivergenceDetected,
  kConfigError,
};

std::string_view error_code_name(ErrorCode code);

// Single exception type for every failure the library reports; callers switch
// on code() rather than on a class hierarchy.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Load errors carry the 1-based line of the offending record.
class MalformedRecord : public Error {
 public:
  MalformedRecord(std::size_t line, const std::string& detail)
      : Error(ErrorCode::kMalformedRecord,
              "line " + std::to_string(line) + ": " + detail),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kEmptyCorpus: return "EmptyCorpus";
    case ErrorCode::kIoFailure: return "IoFailure";
    case ErrorCode::kMalformedRecord: return "MalformedRecord";
    case ErrorCode::kVocabularyMismatch: return "VocabularyMismatch";
    case ErrorCode::kEmptyResponse: return "EmptyResponse";
    case ErrorCode::kInvalidRuleParameters: return "InvalidRuleParameters";
    case ErrorCode::kTimeout: return "Timeout";
    case ErrorCode::kAuthFailure: return "AuthFailure";
    case ErrorCode::kRateLimited: return "RateLimited";
    case ErrorCode::kProtocolError: return "ProtocolError";
    case ErrorCode::kUnsupportedEndpoint: return "UnsupportedEndpoint";
    case ErrorCode::kParseFailure: return "ParseFailure";
    case ErrorCode::kBudgetExhausted: return "BudgetExhausted";
    case ErrorCode::kBudgetExceeded: return "BudgetExceeded";
    case ErrorCode::kEmptyDataset: return "EmptyDataset";
    case ErrorCode::kDivergenceDetected: return "DivergenceDetected";
    case ErrorCode::kConfigError: return "ConfigError";
  }
  return "Unknown";
}

}  // namespace pplkd
