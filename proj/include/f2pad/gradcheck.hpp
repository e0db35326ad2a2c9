#pragma once

// Central finite-difference checks of every differentiable op and objective.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "f2pad/tensor.hpp"

namespace f2pad {

struct FdOptions {
    double h = 1e-5;
    // Coordinates whose one-sided differences disagree by more than this (relative) sit on a kink and are skipped.
    double kink_tol = 1e-3;
};

struct FdComparison {
    double max_rel_error = 0.0;  // max |analytic - fd| / max |fd|
    std::size_t checked = 0;
    std::size_t skipped = 0;
};

// f returns a scalar; analytic is its gradient at x.
FdComparison compare_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, const Tensor& analytic,
                              const FdOptions& opts = {});

struct GradcheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::size_t trials = 0;
    std::size_t skipped = 0;
    bool passed = false;
};

struct GradcheckOptions {
    std::uint64_t seed = 17;
    std::size_t trials = 100;  // per primitive op
    // Scales one analytic gradient to demonstrate that a broken derivative is caught.
    bool inject_fault = false;
};

std::vector<GradcheckEntry> run_gradchecks(const GradcheckOptions& opts = {});

bool all_passed(const std::vector<GradcheckEntry>& entries);
void write_gradcheck_report(std::ostream& os, const std::vector<GradcheckEntry>& entries);

}  // namespace f2pad
