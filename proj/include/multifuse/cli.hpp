#pragma once

#include <string>
#include <vector>

namespace multifuse::cli {

// Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure.
int run(const std::vector<std::string>& args);

}  // namespace multifuse::cli
