#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ctlab::cli {

/// Process exit codes.
enum ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kInvalidArgument = 3,
  kIo = 4,
  kFormat = 5,
  kShape = 6,
  kData = 7,
  kDiverged = 8,
  kLintFindings = 9,
  kReplayMismatch = 10,
  kInternal = 70,
};

/// Runs one command line (without the program name). Diagnostics go to `err`
/// as "error[<kind>]: <message>".
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ctlab::cli
