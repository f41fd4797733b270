#pragma once

// Float64 finite-difference verification of the backward rules, block by
// block: ppsa, cab, spal, cptb, prm, and the full assembled model.

#include <string>
#include <vector>

#include "mbt/common.hpp"

namespace mbt {

struct GradCheckResult {
    std::string block;
    std::vector<std::pair<std::string, double>> group_errors;  // tensor name -> max rel. error
    double worst = 0.0;
    double tolerance = 1e-4;
    bool pass = false;
};

const std::vector<std::string>& gradcheck_blocks();

/// Builds the named block with seeded random parameters (zero-initialized
/// layers included, so their rules are exercised away from the dead point),
/// compares every analytic parameter and input gradient against central
/// differences, and reports the worst relative error per tensor.
GradCheckResult gradcheck_block(const std::string& block, u64 seed, double tolerance = 1e-4);

}  // namespace mbt
