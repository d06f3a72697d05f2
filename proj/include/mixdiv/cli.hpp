#pragma once

#include <ostream>

namespace mixdiv {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;
inline constexpr int kExitIo = 4;

/// Entry point of the `mixdiv` tool. Subcommands: synth, train, decode,
/// evaluate, sweep, gradcheck. Each accepts `--config FILE` holding
/// `key = value` lines named after its long flags; flags on the command
/// line win over the file.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mixdiv
