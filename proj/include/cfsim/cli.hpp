#pragma once

#include <iosfwd>

namespace cfsim {

// Entry point of the `cfsim` tool. Returns the process exit code: 0 on
// success, 1 when the command failed, 2 for usage errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cfsim
