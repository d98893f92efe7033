#pragma once

#include <string>
#include <vector>

namespace oarstd::cli {

// Entry point behind the oarstd executable. Returns the process exit code:
// 0 on success, 1 on usage or validation errors, 2 on runtime failures.
int run(int argc, char** argv);
int run(const std::vector<std::string>& args);

}  // namespace oarstd::cli
