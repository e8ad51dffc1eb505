#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace grmsel::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kValidation = 3, kNumerical = 4 };

/// Runs the command line `args` (without the program name). Errors are written
/// to `err` as one line: `error: <CODE>: <message>`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace grmsel::cli
