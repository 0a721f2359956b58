#pragma once

namespace ghnn {

/// Entry point for the ghnn command line tool (also driven directly by tests).
/// Exit codes: 0 success (including scientifically "diverged" outcomes),
/// 2 usage/configuration, 3 I/O, 4 numerical failure.
int cli_main(int argc, const char* const* argv);

}  // namespace ghnn
