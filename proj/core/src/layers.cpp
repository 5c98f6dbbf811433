// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#include "seqloom/layers.hpp"

#include "seqloom/rng.hpp"

namespace seqloom {

NodeId lstm_sequence(Tape& tape, NodeId W, NodeId R, NodeId b, NodeId xs, int direction) {
  const Tensor& x = tape.value(xs);
  if (!x.has_axis(Axis::Time) || !x.has_axis(Axis::Batch)) {
    throw ShapeError("lstm_sequence: input needs Batch and Time axes, got " +
                     shape_to_string(x.shape()));
  }
  if (direction != 1 && direction != -1) {
    throw std::invalid_argument("lstm_sequence: direction must be +1 or -1");
  }
  std::int64_t T = x.extent(Axis::Time);
  std::int64_t B = x.extent(Axis::Batch);
  std::int64_t H = tape.value(R).shape()[0].extent;
  auto lens = x.seq_lens();

  NodeId input = direction == -1 ? tape.reverse_time_per_seq(xs) : xs;
  NodeId h = tape.constant(Tensor::zeros({{Axis::Batch, B}, {Axis::Feature, H}}));
  NodeId c = tape.constant(Tensor::zeros({{Axis::Batch, B}, {Axis::Feature, H}}));
  std::vector<NodeId> outputs;
  outputs.reserve(static_cast<std::size_t>(T));
  for (std::int64_t t = 0; t < T; ++t) {
    NodeId xt = tape.slice_time(input, t);
    auto step = tape.lstm_step(W, R, b, xt, h, c);
    h = step.h;
    c = step.c;
    outputs.push_back(step.h);
  }
  NodeId stacked = tape.stack_time(outputs, lens);
  NodeId masked = tape.apply_time_mask(stacked);
  return direction == -1 ? tape.reverse_time_per_seq(masked) : masked;
}

IdTensor argmax_feature(const Tensor& values) {
  const Shape& s = values.shape();
  if (s.empty() || s.back().axis != Axis::Feature) {
    throw ShapeError("argmax_feature: values must end in Feature axis");
  }
  std::int64_t v = s.back().extent;
  std::int64_t rows = values.size() / v;
  Shape lead(s.begin(), s.end() - 1);
  IdTensor out = IdTensor::zeros(lead);
  const auto src = values.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* row = src.data() + r * v;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < v; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out.data()[static_cast<std::size_t>(r)] = static_cast<std::int32_t>(best);
  }
  return out;
}

IdTensor choice_select(const ChoicePolicy& policy, const Tensor& log_probs,
                       const IdTensor& true_labels_t, std::int64_t step) {
  if (true_labels_t.size() == 0) {
    throw std::invalid_argument("choice_select: true labels required");
  }
  if (policy.kind == ChoicePolicy::TrueLabels || policy.p <= 0.0) {
    return true_labels_t;
  }
  if (policy.p < 0.0 || policy.p > 1.0) {
    throw std::invalid_argument("choice_select: sampling probability out of [0, 1]");
  }
  IdTensor model = argmax_feature(log_probs);
  if (model.size() != true_labels_t.size()) {
    throw ShapeError("choice_select: label/probability row counts disagree");
  }
  IdTensor out = true_labels_t;
  for (std::int64_t r = 0; r < out.size(); ++r) {
    double u = u01(mix64(policy.sample_key,
                         mix64(static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(r))));
    if (u < policy.p) out.data()[static_cast<std::size_t>(r)] = model.data()[static_cast<std::size_t>(r)];
  }
  return out;
}

NodeId fertility_scale(Tape& tape, NodeId accum, NodeId fertility_gate) {
  return tape.mul(accum, fertility_gate);
}

}  // namespace seqloom
