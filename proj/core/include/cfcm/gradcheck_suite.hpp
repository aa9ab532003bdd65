#pragma once

#include <string>
#include <vector>

namespace cfcm {

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;
  double threshold = 0.0;
  double seconds = 0.0;

  bool passed() const { return max_rel_error < threshold; }
};

// Finite-difference verification of every differentiable primitive plus an
// end-to-end tiny model, all in 64-bit mode. `only` restricts the suite to
// cases whose name contains it.
std::vector<GradCheckCase> run_gradcheck_suite(const std::string& only = "");

bool all_passed(const std::vector<GradCheckCase>& cases);

}  // namespace cfcm
