#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace handiff::cli {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

// Runs the command line; args[0] is the program name. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace handiff::cli
