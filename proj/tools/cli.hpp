#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace chatnmt {

/// Runs one toolkit command. args excludes the program name. Machine output
/// (translations, scores, tables) goes to out; progress, warnings, and error
/// text go to err. Returns the process exit code: 0 success, 1 invalid
/// flags or configuration, 2 runtime failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace chatnmt
