#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "rfl/losses.hpp"

namespace rfl {

struct SelftestSuite {
  std::string name;
  size_t passed = 0, failed = 0;
};

struct SelftestResult {
  std::vector<SelftestSuite> suites;
  bool ok() const {
    for (const auto& s : suites)
      if (s.failed) return false;
    return true;
  }
};

using CtcLossFn = std::function<Tensor(
    const Tensor&, const std::vector<std::vector<int>>&, size_t*)>;

// Release gate: CTC brute-force equivalence, gradient checks, fusion
// identities and renderer goldens. The CTC implementation under test is
// injectable so the oracle's sensitivity is itself testable.
SelftestResult run_selftest(std::ostream& log, CtcLossFn ctc_impl = nullptr);

}  // namespace rfl
