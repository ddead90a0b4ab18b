#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace jmvar {

enum class ErrorCode {
  InvalidArgument = 1,
  Io,
  Schema,
  Validation,
  Config,
  Numeric,
  Convergence,
  Sampler,
  Timeout,
  Internal,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what, std::vector<std::string> fields = {})
      : std::runtime_error(what), code_(code), fields_(std::move(fields)) {}
  ErrorCode code() const noexcept { return code_; }
  /// Config field paths involved, e.g. "sampler.chains". When empty for a
  /// Config error, the path is the message prefix before ": ".
  std::vector<std::string> fields() const;

 private:
  ErrorCode code_;
  std::vector<std::string> fields_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace jmvar
