// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#include "seqloom/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "seqloom/rng.hpp"

namespace seqloom {

namespace {

double eval_loss(const std::function<NodeId(Tape&, const std::vector<NodeId>&)>& build,
                 const std::vector<Tensor>& point) {
  Tape tape(false);
  std::vector<NodeId> leaves;
  leaves.reserve(point.size());
  for (const auto& t : point) leaves.push_back(tape.constant(t));
  NodeId loss = build(tape, leaves);
  return static_cast<double>(tape.value(loss).scalar_value());
}

}  // namespace

double finite_diff_check(
    const std::function<NodeId(Tape&, const std::vector<NodeId>&)>& build,
    const std::vector<Tensor>& point, double epsilon,
    std::int64_t max_coords_per_input, std::uint64_t coord_seed) {
  // Analytic pass: leaves registered as anonymous params to collect grads.
  Tape tape(true);
  std::vector<NodeId> leaves;
  leaves.reserve(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    leaves.push_back(tape.param("fd_input_" + std::to_string(i), point[i]));
  }
  NodeId loss = build(tape, leaves);
  GradBuffer grads = tape.backward(loss);

  double max_rel = 0.0;
  std::vector<Tensor> work = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    Tensor analytic = grads.get_or_zeros(leaves[i], point[i].shape());
    std::int64_t n = point[i].size();
    std::vector<std::int64_t> coords;
    if (max_coords_per_input > 0 && n > max_coords_per_input) {
      RngStream rng(mix64(coord_seed, i));
      for (std::int64_t c = 0; c < max_coords_per_input; ++c) {
        coords.push_back(static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(n))));
      }
    } else {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t c = 0; c < n; ++c) coords[static_cast<std::size_t>(c)] = c;
    }
    for (std::int64_t c : coords) {
      Real saved = work[i].at(c);
      work[i].at(c) = saved + static_cast<Real>(epsilon);
      double up = eval_loss(build, work);
      work[i].at(c) = saved - static_cast<Real>(epsilon);
      double down = eval_loss(build, work);
      work[i].at(c) = saved;
      double numeric = (up - down) / (2.0 * epsilon);
      double a = static_cast<double>(analytic.at(c));
      double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace seqloom
