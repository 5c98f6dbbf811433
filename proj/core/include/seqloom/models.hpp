// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#pragma once

#include "seqloom/config.hpp"

namespace seqloom {

// Builder for the reference encoder-decoder-attention architecture: a stack
// of bidirectional LSTM encoder pairs feeding projected attention keys, and
// a recurrent decoder with accumulated attention-weight feedback, a choice
// feedback layer, and a label-smoothed softmax output.
struct AttentionModelOptions {
  int encoder_layers = 6;         // bidirectional pairs enc0..enc{n-1}
  std::int64_t embed_dim = 620;
  std::int64_t hidden_dim = 1000;  // per direction / decoder cell size
  std::int64_t key_dim = 1000;     // attention key size
  std::int64_t readout_dim = 1000;
  double dropout = 0.3;            // on the output softmax input
  double label_smoothing = 0.1;
  bool inverse_fertility = false;  // optional coverage gate (multiplicative)
};

NetworkConfig make_attention_model(const AttentionModelOptions& opts);

}  // namespace seqloom
