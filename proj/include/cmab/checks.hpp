#pragma once

#include <string>
#include <vector>

#include "cmab/cmanp.hpp"
#include "cmab/matrix.hpp"

// Seeded oracle-equivalence properties over random CMAB/CMANP instances:
// streaming updates vs full recomputation, chunking, permutation
// invariance, and the model-level conditioning/update consistency.

namespace cmab {

struct PropertyResult {
    std::string name;
    double worst_err = 0.0;
    double tolerance = 0.0;
    bool exact = false;  // bitwise property, worst_err is 0 or 1
    bool passed() const { return exact ? worst_err == 0.0 : worst_err < tolerance; }
};

struct EquivalenceReport {
    std::vector<PropertyResult> properties;
    bool all_passed() const {
        for (const auto& p : properties)
            if (!p.passed()) return false;
        return true;
    }
};

// Mixed relative error: max_i |a_i - b_i| / max(1, |a_i| + |b_i|).
double max_rel_err(const Matrix& a, const Matrix& b);

// model_cfg, when given, sets the dimensions of the model-level
// property trials; the block-level trials always randomize dimensions.
EquivalenceReport run_equivalence_suite(std::uint64_t seed, int trials,
                                        double tol,
                                        const CmanpConfig* model_cfg = nullptr);

}  // namespace cmab
