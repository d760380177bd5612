#pragma once

#include <functional>
#include <vector>

#include "rfl/tensor.hpp"

namespace rfl {

// Central finite-difference gradient check. `f` must be a pure scalar-valued
// function of the given tensors. Returns the max over all coordinates of
//    |analytic - numeric| / (|analytic| + eps),   eps = 1e-8.
// Probe points should sit away from relu/max kinks.
double finite_diff_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> xs, double h = 1e-5);

}  // namespace rfl
