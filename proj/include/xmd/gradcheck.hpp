#pragma once

#include <string>
#include <vector>

namespace xmd {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  bool pass = false;
};

// Finite-difference verification of every differentiable primitive at
// `points` seeded random points, plus the full encode -> pool -> mse
// composition on a tiny encoder (d_model 8, 1 layer, 1 head) across all of
// its parameters. `tol` decides pass/fail per entry.
std::vector<GradCheckResult> run_grad_checks(std::size_t points, double h,
                                             double tol);

}  // namespace xmd
