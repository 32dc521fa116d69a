#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mrae {

struct GradCheckCase {
    std::string name;
    bool passed = false;
    double max_rel_err = 0.0;
    std::size_t checked = 0;  // scalar partials probed and accepted
    std::size_t skipped = 0;  // partials at non-smooth points, excluded from max_rel_err
    std::string detail;       // empty when passed
};

struct GradCheckReport {
    std::uint64_t seed = 0;
    double eps = 0.0;
    double tol = 0.0;
    std::vector<GradCheckCase> cases;

    bool all_passed() const;
};

// Central finite differences against reverse-mode gradients for every
// differentiable op plus the soft and template fusion paths end to end.
// Relative error uses max(|analytic|, |numeric|, 1e-3) as denominator.
// An element that fails is re-estimated with a half-width bracket: if the two
// difference quotients disagree with each other, the point is non-smooth at
// probe scale (relu or pooling kink) and the element is skipped; consistent
// quotients that still contradict the analytic value fail the case. Skips
// above roughly 1% of a case's partials also fail it.
GradCheckReport run_gradcheck_suite(std::uint64_t seed, double eps = 1e-5, double tol = 1e-4);

// Fixed-width text table, one row per case.
std::string gradcheck_table(const GradCheckReport& report);

}  // namespace mrae
