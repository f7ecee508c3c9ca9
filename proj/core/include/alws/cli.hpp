#pragma once

namespace alws {

// Entry point shared by the alws binary and the CLI tests.
// Returns 0 on success, 1 on runtime errors, 2 on usage errors.
int cli_main(int argc, const char* const* argv);

}  // namespace alws
