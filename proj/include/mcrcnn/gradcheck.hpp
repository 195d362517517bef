#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "mcrcnn/tensor.hpp"

namespace mcrcnn {

struct GradcheckResult {
  double max_rel_err = 0.0;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool finite = true;
  std::string message;  // set when non-finite values were encountered
};

// Central-difference check of analytic == d fn / d point at the current value
// of point. fn() re-runs the forward pass reading `point` from this same
// storage, and must be deterministic at the evaluation point (fixed rng
// seeds, dropout in infer mode or with a replayed mask). All evaluation and
// accumulation is double precision. max_coords > 0 subsamples coordinates
// with an even stride to bound runtime on large tensors.
template <typename Fn>
GradcheckResult finite_diff_gradcheck(Fn&& fn, Tensor<double>& point,
                                      const Tensor<double>& analytic, double step = 1e-5,
                                      std::int64_t max_coords = -1) {
  check_same_shape(point.shape(), analytic.shape(), "finite_diff_gradcheck");
  GradcheckResult res;
  const std::int64_t n = point.size();
  const std::int64_t stride =
      (max_coords > 0 && n > max_coords) ? (n + max_coords - 1) / max_coords : 1;
  for (std::int64_t i = 0; i < n; i += stride) {
    const double saved = point[i];
    point[i] = saved + step;
    const double fp = fn();
    point[i] = saved - step;
    const double fm = fn();
    point[i] = saved;
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic[i];
    if (!std::isfinite(numeric) || !std::isfinite(a)) {
      res.finite = false;
      res.worst_index = i;
      res.message = "non-finite value at coordinate " + std::to_string(i) + " (analytic " +
                    std::to_string(a) + ", numeric " + std::to_string(numeric) + ")";
      return res;
    }
    const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_index = i;
      res.worst_analytic = a;
      res.worst_numeric = numeric;
    }
  }
  return res;
}

}  // namespace mcrcnn
