#pragma once

#include <functional>
#include <string>
#include <vector>

namespace codream {

struct PropertyResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

// Fast invariant suite: gradient checks, analytic loss values, aggregation
// equivalence, mask cancellation and partition invariants.
std::vector<PropertyResult> run_selftest();

}  // namespace codream
