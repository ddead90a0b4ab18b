#include "jmvar/error.hpp"

namespace jmvar {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::Io: return "io";
    case ErrorCode::Schema: return "schema";
    case ErrorCode::Validation: return "validation";
    case ErrorCode::Config: return "config";
    case ErrorCode::Numeric: return "numeric";
    case ErrorCode::Convergence: return "convergence";
    case ErrorCode::Sampler: return "sampler";
    case ErrorCode::Timeout: return "timeout";
    case ErrorCode::Internal: return "internal";
  }
  return "unknown";
}

std::vector<std::string> Error::fields() const {
  if (!fields_.empty() || code_ != ErrorCode::Config) return fields_;
  std::string msg = what();
  auto colon = msg.find(": ");
  if (colon == std::string::npos || colon == 0) return {};
  std::string head = msg.substr(0, colon);
  if (head.find(' ') != std::string::npos) return {};
  return {head};
}

}  // namespace jmvar
