#pragma once

#include <stdexcept>
#include <string>

namespace mfam {

enum class ErrorCode {
  InvalidArgument,
  Shape,
  Domain,
  Format,
  Length,
  Index,
  Config,
  Io,
  Numeric,
  Contract,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::Shape: return "shape";
    case ErrorCode::Domain: return "domain";
    case ErrorCode::Format: return "format";
    case ErrorCode::Length: return "length";
    case ErrorCode::Index: return "index";
    case ErrorCode::Config: return "config";
    case ErrorCode::Io: return "io";
    case ErrorCode::Numeric: return "numeric";
    case ErrorCode::Contract: return "contract";
  }
  return "unknown";
}

// Single exception type carrying a coarse error class; the C API maps the
// code 1:1 onto its status enum.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace mfam
