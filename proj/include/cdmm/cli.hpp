#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cdmm {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

// Seed streams split off the single --seed flag, one per consumer.
enum SeedStream : unsigned { kSeedData = 1, kSeedTrain = 2, kSeedSupervised = 3, kSeedSplits = 4, kSeedProbes = 5 };

// Entry point of the `cdmm` tool. args[0] is the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace cdmm
