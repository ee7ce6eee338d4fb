#pragma once

#include <functional>
#include <string>

#include "gridformer/param_store.hpp"

namespace gridformer {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t evaluations = 0;
};

// Compares reverse-mode gradients of a scalar loss against central
// differences. For each named parameter the error is
//   max_i |autodiff_i - fd_i| / max(max_i |fd_i|, 1e-8)
// and the result is the maximum over parameters. Requires f64 precision.
// A nonzero `max_coordinates` checks that many evenly spaced entries of each
// parameter instead of all of them.
GradCheckResult gradient_check(ParamStore& params, const std::function<Tensor(const ParamStore&)>& loss,
                               double eps = 1e-5, std::size_t max_coordinates = 0);

}  // namespace gridformer
