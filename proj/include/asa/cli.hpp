#pragma once

#include <iosfwd>
#include <string>

namespace asa::cli {

/// Exit codes of the `asa` client.
enum Exit : int { kOk = 0, kUsage = 1, kServerError = 2, kTransport = 3 };

/// Parse and run one `asa` command line against the manager's HTTP API.
/// `env_manager` is the value of ASA_MANAGER, if set.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
        const std::string& env_manager = "");

}  // namespace asa::cli
