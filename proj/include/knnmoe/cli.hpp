#pragma once

namespace knnmoe {

// Entry point behind the command-line tool; returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace knnmoe
