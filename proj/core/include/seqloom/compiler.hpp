// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "seqloom/config.hpp"
#include "seqloom/param_store.hpp"
#include "seqloom/tape.hpp"

namespace seqloom {

// Execution mode of a compiled graph. The choice layer resolves differently
// per mode: ground-truth labels in Train, a per-step mix of sampled and true
// labels in ScheduledSampling, and beam candidates in Decode.
enum class ExecMode { Train, ScheduledSampling, Decode };

const char* exec_mode_name(ExecMode m);

struct DataDims {
  std::int64_t src_vocab = 0;
  std::int64_t trg_vocab = 0;
};

struct CompileOptions {
  bool hoist = true;  // false forces the naive fully-in-loop schedule
};

class CompileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ExecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One schedulable unit: a top-level layer ("name") or a subnetwork layer
// ("subnet/name").
struct GraphNode {
  std::string qualified;
  std::string local;  // layer name within its scope
  bool in_subnet = false;
  const LayerSpec* spec = nullptr;  // borrowed from CompiledGraph::cfg

  // Placement the hoisting analysis assigns (independent of whether the
  // naive schedule was requested); drives dropout-mask keying.
  bool hoist_class_loop = false;
  // Depends on the choice layer's (known) full-length output in Train mode;
  // such layers hoist to full target-time rank and slice per step.
  bool target_dependent = false;
  // Output carries the source Time axis (decides loop-carried zero shapes).
  bool carries_src_time = false;
  // Output is token ids rather than a float tensor.
  bool is_ids = false;
  // Feature dimensionality of the output (0 for ids).
  std::int64_t feature_dim = 0;
};

struct CompiledGraph {
  ExecMode mode = ExecMode::Train;
  bool hoisted = true;
  NetworkConfig cfg;
  DataDims dims;

  // Actual schedule: pre_loop runs once per batch, loop_body once per output
  // step, post_loop consumes the stacked per-step outputs.
  std::vector<GraphNode> pre_loop;
  std::vector<GraphNode> loop_body;
  std::vector<GraphNode> post_loop;

  // Subnet layers whose previous-step value is referenced (prev:) plus the
  // implicit cell state of every rnn_cell layer.
  std::set<std::string> loop_carried;
  std::set<std::string> rnn_cells;

  // Subnet layers that transitively depend on the choice layer through
  // plain edges (needed for the decode-time evaluation split).
  std::set<std::string> choice_dependent;

  std::string choice_layer;  // local name within the subnet
  std::string loss_layer;    // qualified name of the ce softmax layer ("" if none)
  Real label_smoothing = 0;

  std::vector<std::pair<std::string, Shape>> param_manifest;

  const GraphNode* find_node(const std::string& qualified) const;
  bool has_loop() const { return !cfg.subnet_name.empty(); }
};

CompiledGraph compile(const NetworkConfig& cfg, ExecMode mode, DataDims dims,
                      const CompileOptions& opts = {});

// Batch of encoded sentence pairs. Targets are required for Train and
// ScheduledSampling execution and for forced-path rescoring.
struct EncodedBatch {
  IdTensor src;      // [Batch, Time] with seq_lens
  IdTensor targets;  // [Batch, Time] with seq_lens
};

struct ExecOptions {
  std::uint64_t seed = 1;
  std::uint64_t batch_counter = 0;  // advances per optimizer batch; keys dropout
  bool dropout_enabled = true;
  double scheduled_sampling_p = 0.0;
  // When >= 0 overrides the config's label smoothing.
  double label_smoothing_override = -1.0;
};

struct ExecResult {
  std::unique_ptr<Tape> tape;
  NodeId loss = kNoNode;
  double loss_value = 0.0;
  std::int64_t target_tokens = 0;
  // Stacked per-step log-probs of the loss softmax, [Batch, Time, V].
  NodeId stacked_log_probs = kNoNode;
  // Full-rank values of pre-loop nodes and per-step values of loop nodes.
  std::map<std::string, NodeId> pre_values;
  std::vector<std::map<std::string, NodeId>> step_values;
};

// Unrolls the graph over the batch's target length, producing the masked
// mean cross-entropy loss (label smoothing per config) on one tape.
ExecResult execute_training_graph(const CompiledGraph& g, const EncodedBatch& batch,
                                  ParamStore& params, const ExecOptions& opts);

// Decode-time loop state: the environment computed once per batch plus the
// loop-carried values, laid out over rows = batch x beam.
struct LoopState {
  std::int64_t rows = 0;
  std::int64_t t = 0;
  std::int64_t t_src = 0;
  std::optional<std::vector<std::int32_t>> src_lens;  // tiled over beams
  std::map<std::string, Tensor> env;      // pre-loop values, row-tiled
  std::map<std::string, Tensor> carried;  // previous step outputs (local names)
  std::map<std::string, Tensor> cells;    // rnn_cell internal cell states
  std::map<std::string, Tensor> prev_scope;  // full previous-step scope
  IdTensor feedback;                      // token chosen at step t-1

  // Reorder rows to follow surviving beam parents.
  void gather(const std::vector<std::int64_t>& parent_rows);
};

// Runs the pre-loop schedule on the source batch and tiles every value
// beam_width times along the Batch axis (row-major: row = sentence * beam).
LoopState init_decode_state(const CompiledGraph& g, const IdTensor& src, ParamStore& params,
                            std::int64_t beam_width);

// Advances one decoder step: completes the previous step's choice-dependent
// layers from `feedback_tokens` (ignored at t=0, where initial_output rules
// apply), evaluates the current step, and returns log-probs over the
// vocabulary, shape [Batch(=rows), Feature=V].
Tensor step_decoder(const CompiledGraph& g, LoopState& state, const IdTensor& feedback_tokens,
                    ParamStore& params);

// Schedule listing for --dump-schedule.
std::string format_schedule(const CompiledGraph& g);

}  // namespace seqloom
