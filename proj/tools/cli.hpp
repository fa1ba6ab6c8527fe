#pragma once

#include <iosfwd>

namespace hqdet {

/// Entry point of the `hqdet` tool. Returns 0 on success, 1 on usage
/// errors, 2 on data errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hqdet
