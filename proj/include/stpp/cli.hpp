#pragma once

#include <ostream>

namespace stpp {

// Exit codes: 0 ok, 2 bad configuration or arguments, 3 I/O failure,
// 4 numerical abort.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace stpp
