#pragma once

#include <string>
#include <vector>

namespace flowscan {
namespace verify {

struct CheckResult {
  std::string name;
  bool passed;
  std::string detail;
  double ms;
};

// Runs the property suite for one scope: "all", "transforms" (log
// determinants and inverses of every flow layer), "scan" (sorted-scan
// change of variables and the pair couplings), or "model" (permutation
// invariance, end-to-end gradients, checkpoint persistence).
std::vector<CheckResult> run_checks(const std::string& scope);

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace verify
}  // namespace flowscan
