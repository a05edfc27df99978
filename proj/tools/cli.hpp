#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace treeclstm::cli {

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kCheckFailed = 1;
inline constexpr int kUsage = 2;
inline constexpr int kIo = 3;
inline constexpr int kNumeric = 4;

/// Runs one command line (args[0] is the program name). Machine-readable
/// results go to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace treeclstm::cli
