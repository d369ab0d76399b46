#pragma once

#include <string>
#include <vector>

namespace cdmm {

struct CheckOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Small, fast versions of the oracle suites: finite-difference gradient checks
// of the primitives, the ELBO (both priors) and CTC; analytic KL against Monte
// Carlo; CTC against brute-force alignment enumeration; CDFT round trip.
std::vector<CheckOutcome> run_selfcheck();

}  // namespace cdmm
