#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dialm {

/// Exit code for usage errors (unknown subcommand or flag, missing option).
inline constexpr int kUsageExit = 2;

/// Parses and runs one subcommand; `args` excludes the program name.
/// Returns 0 on success, kUsageExit on usage errors and 1 on runtime failures.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dialm
