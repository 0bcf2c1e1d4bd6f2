#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "llreg/diffops.hpp"
#include "llreg/rng.hpp"

namespace llreg {

/// One differentiable computation to verify. Inputs flagged requires_grad are
/// perturbed; the rest are held constant.
struct GradcheckCase {
    std::string name;
    std::function<std::vector<ad::Var<double>>(Rng&)> make_inputs;
    std::function<ad::Var<double>(const std::vector<ad::Var<double>>&)> fn;
};

struct GradcheckResult {
    std::string op;
    double max_rel_error = 0.0;
    int64_t entries = 0;
    bool passed = true;
};

/// Compares backward() against central differences of a random projection of
/// the output, sum(R * f(x)), all in 64-bit. The relative error of an entry is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
GradcheckResult gradcheck(const GradcheckCase& c, uint64_t seed, double eps, double tol);

struct GradcheckReport {
    std::vector<GradcheckResult> results;  // one per case, worst over all seeds
    bool passed() const;
    std::vector<std::string> failing() const;
    std::string text() const;
};

/// Every primitive plus the attention head and the registration loss.
std::vector<GradcheckCase> builtin_gradcheck_cases();

GradcheckReport run_gradcheck_suite(const std::vector<GradcheckCase>& cases, uint64_t seed, int seed_count,
                                    double eps, double tol);

}  // namespace llreg
