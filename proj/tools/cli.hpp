#pragma once

#include <iosfwd>

namespace sat::cli {

// Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kFailure = 2;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sat::cli
