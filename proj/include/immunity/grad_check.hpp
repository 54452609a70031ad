#pragma once

#include <cstddef>
#include <functional>

#include "immunity/tensor.hpp"

namespace immunity {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences at `point`. The per-coordinate error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
/// Throws NumericError naming the coordinate when a non-finite value appears.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point, double step);

}  // namespace immunity
