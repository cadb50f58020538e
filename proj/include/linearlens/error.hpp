#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace linearlens {

enum class ErrorCode {
  kDimension,
  kDegenerate,
  kNumeric,
  kChecksum,
  kTruncated,
  kVersion,
  kFormat,
  kIo,
  kInvalidArgument,
  kDivergence,
  kUnsupported,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the toolkit; the code decides how callers react
// (the CLI maps it to an exit status and an error JSON document).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace linearlens
