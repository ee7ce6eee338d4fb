#include "gridformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "gridformer/error.hpp"

namespace gridformer {

namespace {

double checked_value(const Tensor& t) {
  double v = t.item();
  if (!std::isfinite(v)) throw NumericError("gradient check: non-finite loss");
  return v;
}

}  // namespace

GradCheckResult gradient_check(ParamStore& params, const std::function<Tensor(const ParamStore&)>& loss,
                               double eps, std::size_t max_coordinates) {
  if (precision() != Precision::f64) throw ValidationError("gradient check requires 64-bit precision");
  if (!(eps > 0.0)) throw ValidationError("gradient check step must be positive");

  GradCheckResult result;
  params.zero_grad();
  Tensor value = loss(params);
  checked_value(value);
  value.backward();
  ++result.evaluations;

  for (auto& [name, param] : params) {
    if (!param.requires_grad()) continue;
    auto values = param.mutable_data();
    std::vector<double> analytic(values.size(), 0.0);
    if (param.has_grad()) std::copy(param.grad().begin(), param.grad().end(), analytic.begin());

    double max_diff = 0.0, max_fd = 0.0;
    NoGradGuard no_grad;
    std::size_t n = values.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coordinates != 0 && max_coordinates < n) {
      // Half the budget on the largest analytic entries, half evenly spaced.
      std::size_t top = max_coordinates / 2;
      std::partial_sort(coords.begin(), coords.begin() + static_cast<std::ptrdiff_t>(top), coords.end(),
                        [&](std::size_t a, std::size_t b) { return std::abs(analytic[a]) > std::abs(analytic[b]); });
      coords.resize(top);
      std::size_t spread = max_coordinates - top;
      for (std::size_t q = 0; q < spread; ++q) coords.push_back(q * n / spread);
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    for (std::size_t i : coords) {
      double saved = values[i];
      values[i] = saved + eps;
      double plus = checked_value(loss(params));
      values[i] = saved - eps;
      double minus = checked_value(loss(params));
      values[i] = saved;
      result.evaluations += 2;
      double fd = (plus - minus) / (2.0 * eps);
      max_diff = std::max(max_diff, std::abs(analytic[i] - fd));
      max_fd = std::max(max_fd, std::abs(fd));
    }
    double rel = max_diff / std::max(max_fd, 1e-8);
    if (rel >= result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_parameter = name;
    }
  }
  return result;
}

}  // namespace gridformer
