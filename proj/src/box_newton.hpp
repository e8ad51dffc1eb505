#pragma once

// Small dense bound-constrained maximizer used by the calibration M-steps.

#include <functional>
#include <span>
#include <vector>

#include "grmsel/grm.hpp"

namespace grmsel::detail {

struct BoxProblem {
  std::function<double(std::span<const double>)> value;
  std::function<void(std::span<const double>, std::span<double>)> gradient;
  std::vector<double> lower;
  std::vector<double> upper;
};

struct BoxResult {
  std::vector<double> x;
  double value = 0.0;
  int iterations = 0;
};

/// Projected Newton ascent with a finite-difference Hessian of the analytic
/// gradient and Levenberg damping. The returned value is never below value(x0).
BoxResult maximize_box(const BoxProblem& problem, std::vector<double> x0, int max_iterations = 50,
                       double gradient_tolerance = 1e-9);

/// Adds weight * d log P(Y = m | theta) / d(a, b_1, ..., b_M) to grad.
void accumulate_item_gradient(const ItemParams& item, int m, double theta, double weight,
                              std::span<double> grad);

}  // namespace grmsel::detail
