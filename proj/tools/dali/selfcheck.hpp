#pragma once

#include <string>
#include <vector>

namespace dali::cli {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Fast invariant suite: gradients, schedule and sampler algebra, attention,
/// VAE KL, metric identities and file round trips. Runs in a few seconds.
std::vector<CheckResult> run_selfcheck(int workers);

}  // namespace dali::cli
