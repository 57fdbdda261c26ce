#ifndef ATTNSEG_CLI_HPP
#define ATTNSEG_CLI_HPP

#include <string>
#include <vector>

namespace attnseg {

/// Entry point of the `attnseg` command. Returns the process exit code:
/// 0 success, 2 usage or input error, 3 numeric failure.
int run_cli(int argc, const char* const* argv);

/// Same, with the program name omitted from `args`.
int run_cli(const std::vector<std::string>& args);

}  // namespace attnseg

#endif  // ATTNSEG_CLI_HPP
