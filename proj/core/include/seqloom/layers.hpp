// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "seqloom/tape.hpp"

namespace seqloom {

// Runs an LSTM over the Time axis of xs [Batch, Time, D] and returns
// [Batch, Time, H]. direction -1 processes each sequence's valid prefix in
// reverse and writes outputs back to their original positions. Masked
// positions output exactly zero.
NodeId lstm_sequence(Tape& tape, NodeId W, NodeId R, NodeId b, NodeId xs, int direction);

// Mode-resolved feedback selection for one decoder step.
struct ChoicePolicy {
  enum Kind { TrueLabels, Sample } kind = TrueLabels;
  double p = 0.0;              // probability of taking the model's argmax
  std::uint64_t sample_key = 0;  // counter-rng key; draws index by (step, row)
};

// TrueLabels returns true_labels_t. Sample takes, per position, the argmax
// of log_probs with probability p and the true label otherwise.
IdTensor choice_select(const ChoicePolicy& policy, const Tensor& log_probs,
                       const IdTensor& true_labels_t, std::int64_t step);

// Row-wise argmax over the Feature axis (deterministic: lowest index wins ties).
IdTensor argmax_feature(const Tensor& values);

// Coverage feedback scaled by a precomputed inverse-fertility gate:
// feedback = accum (*) gate, a plain elementwise product (no division).
NodeId fertility_scale(Tape& tape, NodeId accum, NodeId fertility_gate);

}  // namespace seqloom
