#pragma once

namespace tam::cli {

/// Entry point for the `tam` command-line tool. Returns the process exit
/// status: 0 on success, 1 on validation/usage errors, 2 on runtime failure.
int run_cli(int argc, const char* const* argv);

}  // namespace tam::cli
