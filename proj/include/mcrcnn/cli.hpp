#pragma once

namespace mcrcnn {

// Process exit codes, also documented in the executable's --help footer.
enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,     // unexpected failure
  kExitUsage = 2,        // unknown subcommand or malformed flags
  kExitConfig = 3,       // invalid configuration value
  kExitIo = 4,           // missing or unreadable file
  kExitNumeric = 5,      // non-finite numbers during computation
  kExitCheckFailed = 6,  // gradient check exceeded its tolerance
};

// Full command-line entry point; returns the process exit code. Stateless:
// safe to call repeatedly within one process.
int run_cli(int argc, const char* const* argv);

}  // namespace mcrcnn
