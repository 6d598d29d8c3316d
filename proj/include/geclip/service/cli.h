#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace geclip::service {

// Stable exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitCompute = 4;

// Subcommands: explain, eval, finetune, gen-toy-data, serve, convert-weights.
// `args` excludes the program name. The bundle path defaults to $GECLIP_MODEL.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace geclip::service
