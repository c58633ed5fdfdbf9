#pragma once

// Finite-difference gradient oracle used across the test suites. Perturbs f32
// parameter storage and divides by the realized (post-quantization) step so
// the check measures the analytic gradient, not float rounding.

#include <cmath>
#include <functional>
#include <vector>

#include "urbanmind/params.hpp"
#include "urbanmind/rng.hpp"

namespace umtest {

struct GradCheckResult {
  double max_rel_error = 0.0;
  int coords_checked = 0;
};

// loss() must evaluate the model from current parameter storage;
// analytic_grad(p) must return the full gradient tensor for parameter p.
inline GradCheckResult finite_difference_check(
    std::vector<urbanmind::Param*> params,
    const std::function<double()>& loss,
    const std::function<urbanmind::Tensor(const urbanmind::Param&)>& analytic_grad,
    int coords_per_param, double eps, urbanmind::Rng& rng) {
  GradCheckResult result;
  for (urbanmind::Param* p : params) {
    const urbanmind::Tensor grad = analytic_grad(*p);
    for (int k = 0; k < coords_per_param; ++k) {
      const auto idx = static_cast<size_t>(rng.below(static_cast<uint64_t>(p->size())));
      const float saved = p->value[idx];

      p->value[idx] = static_cast<float>(static_cast<double>(saved) + eps);
      const double hi_x = static_cast<double>(p->value[idx]);
      const double hi = loss();
      p->value[idx] = static_cast<float>(static_cast<double>(saved) - eps);
      const double lo_x = static_cast<double>(p->value[idx]);
      const double lo = loss();
      p->value[idx] = saved;

      const double fd = (hi - lo) / (hi_x - lo_x);
      const double an = grad[static_cast<int64_t>(idx)];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
      result.max_rel_error = std::max(result.max_rel_error, rel);
      ++result.coords_checked;
    }
  }
  return result;
}

}  // namespace umtest
