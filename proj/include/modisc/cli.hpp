#pragma once

#include "modisc/runconfig.hpp"

namespace modisc::cli {

// Commands throw UsageError / DataError / NumericError; run_cli maps
// them to exit codes 1 / 2 / 3.
void cmd_gen(const RunConfig& config);
void cmd_train(const RunConfig& config);
void cmd_infer(const RunConfig& config);
void cmd_fuse(const RunConfig& config);
void cmd_eval(const RunConfig& config);

int run_cli(int argc, const char* const* argv);

// MODISC_VERBOSE >= 1 enables progress lines on stderr.
int verbosity();

}  // namespace modisc::cli
