#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mtat {

struct GradcheckResult {
  std::string op;
  int cases = 0;
  double max_rel_error = 0.0;
};

/// Central finite-difference check (h = 1e-5, double precision) of every
/// catalog op on `cases_per_op` random shapes. The scalar probed is
/// sum(out * R) for a fixed random R; the error of one element is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed, int cases_per_op = 5);

inline constexpr double kGradcheckTolerance = 1e-4;

}  // namespace mtat
