#pragma once

#include <iosfwd>

namespace linearlens {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;

/// Entry point of the `linearlens` tool. Results go to `out` as one JSON
/// line; failures go to `err` as {"error": {...}, "exit_code": n}.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace linearlens
