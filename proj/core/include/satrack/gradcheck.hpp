#pragma once

#include <functional>
#include <vector>

#include "satrack/tensor.hpp"

namespace satrack {

/// Compares reverse-mode gradients of a deterministic scalar function
/// against central finite differences over every element of `params`.
/// Returns the maximum relative error
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// eps must lie in (0, 1e-3]; a non-finite function value raises InputError.
double grad_check(const std::function<Tensor()>& f,
                  const std::vector<Tensor>& params, double eps = 1e-5);

} // namespace satrack
