#include "immunity/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "immunity/error.hpp"

namespace immunity {

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point, double step) {
  if (!(step > 0.0)) throw ConfigError("grad_check: step must be positive");
  std::vector<double> base(point.data().begin(), point.data().end());

  Tensor x(point.shape(), base, true);
  Tensor y = fn(x);
  if (y.numel() != 1) throw ShapeError("grad_check: function must return a scalar");
  if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite function value at the check point");
  backward(y);
  std::vector<double> analytic = x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                              : std::vector<double>(base.size(), 0.0);

  auto eval = [&](std::vector<double> at) { return fn(Tensor(point.shape(), std::move(at))).item(); };

  GradCheckResult result;
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto plus = base;
    auto minus = base;
    plus[i] += step;
    minus[i] -= step;
    const double numeric = (eval(std::move(plus)) - eval(std::move(minus))) / (2.0 * step);
    if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
      throw NumericError("grad_check: non-finite derivative at coordinate " + std::to_string(i));
    }
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
    const double err = std::abs(analytic[i] - numeric) / denom;
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace immunity
