#pragma once

#include <string>
#include <vector>

namespace abound {

/// Exit codes returned by run_command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitBadConfig = 2;
inline constexpr int kExitMissingFile = 3;

/// Runs one subcommand (synth, train, forge, score, eval). `args` excludes
/// the program name. Prints the run directory on stdout when successful.
int run_command(const std::vector<std::string>& args);
int run_command(int argc, char** argv);

}  // namespace abound
