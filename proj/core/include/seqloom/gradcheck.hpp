// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#pragma once

#include <functional>
#include <vector>

#include "seqloom/tape.hpp"

namespace seqloom {

// Compares tape gradients against central finite differences.
//
// `build` receives a fresh tape plus one leaf node per input tensor and must
// return a scalar loss node. The check perturbs input coordinates by
// +/- epsilon, so it is meant for the double-precision build on small
// problems. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
// denominator. Returns the maximum relative error over all checked
// coordinates. max_coords_per_input = 0 checks every coordinate; a positive
// value checks a seeded random subset per input.
double finite_diff_check(
    const std::function<NodeId(Tape&, const std::vector<NodeId>&)>& build,
    const std::vector<Tensor>& point, double epsilon = 1e-5,
    std::int64_t max_coords_per_input = 0, std::uint64_t coord_seed = 1);

}  // namespace seqloom
