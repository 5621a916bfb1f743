#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace galite::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;

// Runs one subcommand. `args` excludes the program name. Data and summaries
// go to `out`, usage text and progress to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, char** argv);

const char* version();

}  // namespace galite::cli
