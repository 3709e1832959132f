#pragma once

#include <iosfwd>

namespace topoforge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

// Runs one invocation of the topoforge tool. Normal output goes to out,
// diagnostics to err. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace topoforge::cli
