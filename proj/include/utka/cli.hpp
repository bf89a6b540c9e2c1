#pragma once

#include <string>
#include <vector>

namespace utka::cli {

// In-process command entry point; argv-style arguments without the program
// name. Subcommands: simulate, codec-train, lm-train, tokenize, detokenize,
// generate, evaluate, backend.
//
// Exit codes: 0 ok, 2 configuration or usage error, 3 conditioning template
// violation, 4 training fault (non-finite loss), 5 file or data error.
// Training commands write the final checkpoint to --out and periodic
// snapshots to "<out>.<phase><step>"; separation output lands in
// "<stem>.trk0.wav" and "<stem>.trk1.wav".
int run(const std::vector<std::string>& args);

}  // namespace utka::cli
