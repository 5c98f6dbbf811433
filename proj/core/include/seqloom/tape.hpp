// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "seqloom/rng.hpp"
#include "seqloom/tensor.hpp"

namespace seqloom {

using NodeId = std::int32_t;
constexpr NodeId kNoNode = -1;

enum class EwKind { Add, Mul, Tanh, Sigmoid, Relu, Exp, Log };

// Key for a counter-based dropout mask. Masks are pure functions of
// (key, step_tag, element position), so replaying a graph under a different
// schedule draws the exact same masks.
struct DropoutKey {
  std::uint64_t key = 0;
};

// step_tag semantics for dropout:
//   kStaticStep  — key elements by the tensor's own Time coordinate (when it
//                  has one); used for values computed once per sequence batch.
//   t >= 0       — key elements by the given decoder step; used for values
//                  that exist once per step of the recurrent loop.
constexpr std::int64_t kStaticStep = -1;

// Gradients accumulated during backward, addressed by node id.
class GradBuffer {
 public:
  explicit GradBuffer(std::size_t n_nodes) : grads_(n_nodes) {}

  void accumulate(NodeId id, Tensor g);
  bool has(NodeId id) const { return grads_[static_cast<std::size_t>(id)].has_value(); }
  const Tensor* get(NodeId id) const;
  // Grad of id, or zeros of the given shape when the node was not reached.
  Tensor get_or_zeros(NodeId id, const Shape& shape) const;

 private:
  std::vector<std::optional<Tensor>> grads_;
};

// Reverse-mode tape. Records are appended in execution (topological) order;
// backward replays them in reverse. With gradients disabled the tape only
// stores forward values, which keeps decode-time memory flat.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t record_count() const { return records_.size(); }

  // Leaves.
  NodeId constant(Tensor value, std::string tag = {});
  NodeId param(const std::string& name, Tensor value);

  // Elementwise with named-axis broadcasting.
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId unary(EwKind kind, NodeId x);
  NodeId tanh(NodeId x) { return unary(EwKind::Tanh, x); }
  NodeId sigmoid(NodeId x) { return unary(EwKind::Sigmoid, x); }
  NodeId relu(NodeId x) { return unary(EwKind::Relu, x); }
  NodeId exp(NodeId x) { return unary(EwKind::Exp, x); }
  NodeId log(NodeId x) { return unary(EwKind::Log, x); }
  NodeId scale(NodeId x, Real factor);

  // Contraction of x's Feature axis with a rank-2 weight [Feature=K, Other=N];
  // the result's last axis is Feature=N. Leading axes of x are batched.
  NodeId matmul(NodeId x, NodeId weight);

  // Sum over an axis. Summing over Time honors seq_lens: masked positions
  // contribute zero.
  NodeId reduce_sum(NodeId x, Axis axis);

  // Row lookup into a rank-2 table [Feature=V, Other=D]; gradients scatter
  // back into the table. `layer` names the offender in range errors.
  NodeId gather_rows(NodeId table, const IdTensor& ids, const std::string& layer);

  // Pick per-row feature entries: values [.., Feature=V] indexed by ids of
  // the matching leading shape; result drops the Feature axis.
  NodeId gather_feature(NodeId values, const IdTensor& ids, const std::string& layer);

  // Inverted dropout. Train mode zeroes each element with probability `rate`
  // and scales survivors by 1/(1-rate); eval mode is the identity.
  NodeId dropout(NodeId x, Real rate, DropoutKey key, std::int64_t step_tag, bool train);

  NodeId slice_time(NodeId x, std::int64_t t);
  NodeId stack_time(std::span<const NodeId> steps,
                    std::optional<std::vector<std::int32_t>> seq_lens);
  NodeId concat_feature(std::span<const NodeId> parts);

  // Zero every masked Time position (per seq_lens).
  NodeId apply_time_mask(NodeId x);

  // Reverse the valid prefix of every sequence along Time; masked tail stays.
  NodeId reverse_time_per_seq(NodeId x);

  // Log-softmax over the Feature axis.
  NodeId log_softmax(NodeId x);

  // Softmax over the Time axis, restricted to valid positions; masked
  // positions are exactly zero. Stabilized by max subtraction over the
  // valid range.
  NodeId softmax_over_spatial(NodeId e);

  // context[b, d] = sum_t weights[b, t, 0] * base[b, t, d]
  NodeId generic_attention(NodeId weights, NodeId base);

  struct LstmOut {
    NodeId h;
    NodeId c;
  };
  // One LSTM step; gate block order is (input, forget, cell-candidate,
  // output). W: [Feature=Dx, Other=4H], R: [Feature=H, Other=4H], b: [4H].
  LstmOut lstm_step(NodeId W, NodeId R, NodeId b, NodeId x, NodeId h_prev, NodeId c_prev);

  // Label-smoothed cross entropy, mean over valid target positions.
  // log_probs: [Batch, Time, Feature=V]; targets: [Batch, Time] ids.
  NodeId ce_label_smoothing(NodeId log_probs, const IdTensor& targets, Real epsilon,
                            const std::string& layer);

  // Expected-risk objective over grouped hypothesis scores. `scores` is a
  // flat [Batch=N] vector, group[i] identifies the sentence of hypothesis i,
  // quality[i] its sentence-level quality (e.g. smoothed BLEU). The loss is
  // the mean over sentences of -sum_i p_i * quality_i with p = softmax of
  // the scores within each sentence.
  NodeId risk_loss(NodeId scores, const std::vector<double>& quality,
                   const std::vector<std::int32_t>& group, std::int32_t n_groups);

  const Tensor& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const std::string& tag(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].tag; }
  void set_tag(NodeId id, std::string tag) { nodes_[static_cast<std::size_t>(id)].tag = std::move(tag); }
  bool needs_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  // Reverse-mode sweep from a scalar loss. Returns per-node gradients.
  GradBuffer backward(NodeId loss) const;

  // Gradients of the registered params; unreachable params get zeros.
  std::map<std::string, Tensor> param_gradients(const GradBuffer& g) const;

  const std::map<std::string, NodeId>& param_nodes() const { return params_; }

  // First recorded node whose value contains a non-finite entry, if any.
  std::optional<std::pair<NodeId, std::string>> find_non_finite() const;

 private:
  struct Node {
    Tensor value;
    bool needs_grad = false;
    std::string tag;
  };
  struct Record {
    std::vector<NodeId> inputs;
    std::vector<NodeId> outputs;
    std::function<void(const Tape&, GradBuffer&)> backward;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<Record> records_;
  std::map<std::string, NodeId> params_;

  NodeId emit(Tensor value, bool needs_grad, std::string tag = {});
  bool any_needs_grad(std::initializer_list<NodeId> ids) const;
  void record(std::vector<NodeId> inputs, std::vector<NodeId> outputs,
              std::function<void(const Tape&, GradBuffer&)> fn);
};

}  // namespace seqloom
