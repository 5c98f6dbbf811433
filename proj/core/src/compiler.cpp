// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#include "seqloom/compiler.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "seqloom/layers.hpp"
#include "seqloom/rng.hpp"

namespace seqloom {

const char* exec_mode_name(ExecMode m) {
  switch (m) {
    case ExecMode::Train: return "train";
    case ExecMode::ScheduledSampling: return "scheduled_sampling";
    case ExecMode::Decode: return "decode";
  }
  return "?";
}

const GraphNode* CompiledGraph::find_node(const std::string& qualified) const {
  for (const auto* list : {&pre_loop, &loop_body, &post_loop}) {
    for (const auto& n : *list) {
      if (n.qualified == qualified) return &n;
    }
  }
  return nullptr;
}

namespace {

[[noreturn]] void fail(const std::string& msg) { throw CompileError(msg); }

struct LayerInfo {
  bool is_ids = false;
  std::int64_t dim = 0;
  bool src_time = false;
  std::int64_t in_dim = 0;        // concatenated float input width
  std::int64_t embed_vocab = 0;   // for id-consuming linears
};

// Static inference over the whole network: output kind (ids/float), feature
// width, and whether the value carries the source Time axis.
class Analyzer {
 public:
  Analyzer(const NetworkConfig& cfg, ExecMode mode, DataDims dims)
      : cfg_(cfg), mode_(mode), dims_(dims) {
    dep_ = resolve_references(cfg);
  }

  const DepGraph& deps() const { return dep_; }

  LayerInfo& info(const std::string& qualified) { return info_.at(qualified); }
  const LayerSpec& spec(const std::string& qualified) const { return *specs_.at(qualified); }
  bool in_subnet(const std::string& qualified) const {
    return qualified.find('/') != std::string::npos;
  }

  void run() {
    collect_specs();
    for (const auto& q : dep_.topo_order) infer(q);
  }

  std::string qualify(const std::string& local) const { return cfg_.subnet_name + "/" + local; }

  // Resolves a reference as seen from a layer; returns the qualified name.
  std::string resolve(const LayerRef& r, bool from_subnet) const {
    if (r.kind == RefKind::Base) return r.name;
    if (from_subnet) return qualify(r.name);
    return r.name;
  }

 private:
  const NetworkConfig& cfg_;
  ExecMode mode_;
  DataDims dims_;
  DepGraph dep_;
  std::map<std::string, const LayerSpec*> specs_;
  std::map<std::string, LayerInfo> info_;

  void collect_specs() {
    for (const auto& [name, spec] : cfg_.layers) specs_[name] = &spec;
    if (!cfg_.subnet_name.empty()) {
      for (const auto& [name, spec] : cfg_.layers.at(cfg_.subnet_name).subnet) {
        specs_[qualify(name)] = &spec;
      }
    }
    for (const auto& [q, s] : specs_) info_[q] = LayerInfo{};
  }

  LayerInfo ref_info(const LayerRef& r, bool from_subnet) const {
    if (r.kind != RefKind::Base && !from_subnet && r.name == "data") {
      LayerInfo d;
      d.is_ids = true;
      d.src_time = true;
      return d;
    }
    return info_.at(resolve(r, from_subnet));
  }

  void infer(const std::string& q) {
    const LayerSpec& s = *specs_.at(q);
    bool sub = in_subnet(q);
    LayerInfo out;
    std::vector<LayerInfo> ins;
    for (const auto& r : s.from) {
      if (r.kind == RefKind::Prev) {
        ins.push_back(info_.at(resolve(r, sub)));  // same shape as current value
      } else {
        ins.push_back(ref_info(r, sub));
      }
    }
    auto concat_width = [&]() {
      std::int64_t w = 0;
      for (const auto& i : ins) {
        if (i.is_ids) fail("layer '" + q + "' mixes id and tensor inputs");
        w += i.dim;
      }
      return w;
    };
    auto any_time = [&]() {
      for (const auto& i : ins) {
        if (i.src_time) return true;
      }
      return false;
    };
    switch (s.cls) {
      case LayerClass::Linear: {
        if (ins.size() == 1 && ins[0].is_ids) {
          // A linear layer over token ids is an embedding lookup.
          out.dim = *s.n_out;
          out.src_time = ins[0].src_time;
          const LayerRef& r = s.from[0];
          bool from_data = !sub && r.kind == RefKind::Plain && r.name == "data";
          out.embed_vocab = from_data ? dims_.src_vocab : dims_.trg_vocab;
          if (out.embed_vocab <= 0) {
            fail("layer '" + q + "' embeds token ids but the vocabulary size is unknown");
          }
          LayerInfo& self = info_.at(q);
          self = out;
          self.embed_vocab = out.embed_vocab;
          return;
        }
        out.dim = *s.n_out;
        out.in_dim = concat_width();
        out.src_time = any_time();
        break;
      }
      case LayerClass::Rec:
        out.dim = *s.n_out;
        out.in_dim = concat_width();
        out.src_time = true;
        break;
      case LayerClass::Copy:
        out.dim = concat_width();
        out.src_time = any_time();
        break;
      case LayerClass::Combine: {
        std::int64_t d = 0;
        for (const auto& i : ins) {
          if (i.is_ids) fail("layer '" + q + "' combines id inputs");
          d = std::max(d, i.dim);
        }
        for (const auto& i : ins) {
          if (i.dim != d && i.dim != 1) {
            fail("layer '" + q + "' combines incompatible widths");
          }
        }
        out.dim = d;
        out.src_time = any_time();
        break;
      }
      case LayerClass::Activation:
        if (ins.size() != 1 || ins[0].is_ids) {
          fail("activation layer '" + q + "' needs exactly one tensor input");
        }
        out.dim = ins[0].dim;
        out.src_time = ins[0].src_time;
        break;
      case LayerClass::SoftmaxOverSpatial:
        if (ins.size() != 1 || ins[0].is_ids || !ins[0].src_time) {
          fail("softmax_over_spatial layer '" + q + "' needs one Time-carrying input");
        }
        out.dim = ins[0].dim;
        out.src_time = true;
        break;
      case LayerClass::GenericAttention: {
        LayerInfo w = ref_info(parse_ref(s.weights), sub);
        LayerInfo b = ref_info(parse_ref(s.base), sub);
        if (w.is_ids || b.is_ids) fail("generic_attention '" + q + "' needs tensor inputs");
        out.dim = b.dim;
        out.src_time = false;
        break;
      }
      case LayerClass::RnnCell:
        out.dim = *s.n_out;
        out.in_dim = concat_width();
        out.src_time = false;
        break;
      case LayerClass::Choice:
        out.is_ids = true;
        break;
      case LayerClass::Softmax:
        out.dim = s.n_out.value_or(dims_.trg_vocab);
        if (out.dim <= 0) {
          fail("softmax layer '" + q + "' has no n_out and the target vocabulary is unknown");
        }
        out.in_dim = concat_width();
        out.src_time = any_time();
        break;
      case LayerClass::Decide:
        out.is_ids = true;
        break;
      case LayerClass::Subnetwork:
        out.is_ids = true;  // the container's value is the chosen token sequence
        break;
    }
    info_.at(q) = out;
  }
};

}  // namespace

CompiledGraph compile(const NetworkConfig& cfg, ExecMode mode, DataDims dims,
                      const CompileOptions& opts) {
  auto diags = validate_config(cfg);
  if (!diags.empty()) {
    fail("cannot compile invalid config (layer '" + diags[0].layer + "': " +
         diags[0].message + ")");
  }
  CompiledGraph g;
  g.mode = mode;
  g.hoisted = opts.hoist;
  g.cfg = cfg;
  g.dims = dims;

  Analyzer an(g.cfg, mode, dims);
  an.run();

  const bool has_sub = !g.cfg.subnet_name.empty();
  const auto& subnet =
      has_sub ? g.cfg.layers.at(g.cfg.subnet_name).subnet : std::map<std::string, LayerSpec>{};

  if (mode == ExecMode::Decode && !has_sub) {
    fail("decode mode requires a recurrent subnetwork");
  }

  // Locate the choice layer and collect prev-referenced layers.
  std::map<std::string, bool> has_prev_input;
  for (const auto& [name, spec] : subnet) {
    if (spec.cls == LayerClass::Choice) g.choice_layer = name;
    bool prev = false;
    for (const auto& r : spec.from) {
      if (r.kind == RefKind::Prev) {
        prev = true;
        g.loop_carried.insert(r.name);
      }
    }
    has_prev_input[name] = prev;
    if (spec.cls == LayerClass::RnnCell) {
      g.rnn_cells.insert(name);
      g.loop_carried.insert(name);
    }
  }

  // Plain dependency lists inside the subnet. The choice layer's input edge
  // is severed in Train mode, where its value is the known target labels.
  std::map<std::string, std::vector<std::string>> sub_plain;
  for (const auto& [name, spec] : subnet) {
    auto& deps = sub_plain[name];
    if (spec.cls == LayerClass::Choice && mode == ExecMode::Train) {
      continue;
    }
    for (const auto& r : spec.from) {
      if (r.kind == RefKind::Plain) deps.push_back(r.name);
    }
    if (spec.cls == LayerClass::GenericAttention) {
      LayerRef w = parse_ref(spec.weights);
      if (w.kind == RefKind::Plain) deps.push_back(w.name);
      LayerRef b = parse_ref(spec.base);
      if (b.kind == RefKind::Plain) deps.push_back(b.name);
    }
  }

  // Topological order of the subnet's plain edges (lexicographic ties). The
  // full edge set (including the choice edge) is acyclic per validation, so
  // ordering with the severed edge set succeeds too; use the full set so the
  // order is identical across modes.
  std::vector<std::string> sub_topo;
  {
    std::map<std::string, std::vector<std::string>> full;
    for (const auto& [name, spec] : subnet) {
      auto& deps = full[name];
      for (const auto& r : spec.from) {
        if (r.kind == RefKind::Plain) deps.push_back(r.name);
      }
      if (spec.cls == LayerClass::GenericAttention) {
        LayerRef w = parse_ref(spec.weights);
        if (w.kind == RefKind::Plain) deps.push_back(w.name);
        LayerRef b = parse_ref(spec.base);
        if (b.kind == RefKind::Plain) deps.push_back(b.name);
      }
    }
    std::map<std::string, int> indeg;
    std::map<std::string, std::vector<std::string>> consumers;
    for (const auto& [n, d] : full) indeg[n] = 0;
    for (const auto& [n, d] : full) {
      for (const auto& dep : d) {
        if (indeg.count(dep)) {
          indeg[n]++;
          consumers[dep].push_back(n);
        }
      }
    }
    std::set<std::string> ready;
    for (const auto& [n, deg] : indeg) {
      if (deg == 0) ready.insert(n);
    }
    while (!ready.empty()) {
      std::string n = *ready.begin();
      ready.erase(ready.begin());
      sub_topo.push_back(n);
      for (const auto& c : consumers[n]) {
        if (--indeg[c] == 0) ready.insert(c);
      }
    }
    if (sub_topo.size() != indeg.size()) fail("internal: subnet ordering failed");
  }

  // Hoisting analysis: a layer stays in the loop iff it transitively depends
  // (through plain edges) on a prev: reference or a step-local source. The
  // choice layer is step-local except in Train mode, where the full label
  // sequence is known upfront; rnn_cell state is always step-local.
  std::map<std::string, bool> in_loop;
  std::map<std::string, bool> target_dep;
  for (const auto& name : sub_topo) {
    const LayerSpec& spec = subnet.at(name);
    bool step_local = spec.cls == LayerClass::RnnCell ||
                      (spec.cls == LayerClass::Choice && mode != ExecMode::Train);
    bool loop = step_local || has_prev_input[name];
    bool tdep = mode == ExecMode::Train && spec.cls == LayerClass::Choice;
    for (const auto& d : sub_plain[name]) {
      if (in_loop[d]) loop = true;
      if (target_dep[d]) tdep = true;
    }
    // A hoisted value cannot carry both the target and the source Time axis;
    // such layers stay in the loop where the per-step value is unambiguous.
    if (!loop && tdep && an.info(an.qualify(name)).src_time) loop = true;
    in_loop[name] = loop;
    target_dep[name] = tdep;
  }
  for (const auto& [name, tdep] : target_dep) {
    if (tdep) g.choice_dependent.insert(name);
  }
  if (mode != ExecMode::Train) {
    // choice_dependent drives the decode split; recompute mode-agnostically.
    g.choice_dependent.clear();
    std::map<std::string, bool> cdep;
    for (const auto& name : sub_topo) {
      bool dep = subnet.at(name).cls == LayerClass::Choice;
      for (const auto& d : sub_plain[name]) {
        if (cdep[d]) dep = true;
      }
      cdep[name] = dep;
      if (dep) g.choice_dependent.insert(name);
    }
  }

  if (mode == ExecMode::Decode) {
    for (const auto& name : g.choice_dependent) {
      if (name == g.choice_layer) continue;
      if (has_prev_input[name]) {
        fail("layer '" + name +
             "' depends on the choice layer and uses prev: references; this combination is "
             "not decodable");
      }
    }
  }

  // Build graph nodes.
  auto make_node = [&](const std::string& qualified, const std::string& local, bool sub_scope) {
    GraphNode n;
    n.qualified = qualified;
    n.local = local;
    n.in_subnet = sub_scope;
    n.spec = sub_scope ? &subnet.at(local) : &g.cfg.layers.at(local);
    const LayerInfo& li = an.info(qualified);
    n.is_ids = li.is_ids;
    n.feature_dim = li.dim;
    n.carries_src_time = li.src_time;
    if (sub_scope) {
      n.hoist_class_loop = in_loop[local];
      n.target_dependent = target_dep.count(local) ? target_dep[local] : false;
      if (mode != ExecMode::Train) n.target_dependent = false;
    }
    return n;
  };

  // Top-level layers: layers consuming the subnet container output run after
  // the loop; only decide layers may do so.
  std::set<std::string> post_top;
  for (const auto& [name, spec] : g.cfg.layers) {
    if (spec.is_subnetwork()) continue;
    bool consumes_container = false;
    for (const auto& r : spec.from) {
      if (r.kind == RefKind::Plain && has_sub && r.name == g.cfg.subnet_name) {
        consumes_container = true;
      }
    }
    if (consumes_container) {
      if (spec.cls != LayerClass::Decide) {
        fail("layer '" + name + "' consumes the recurrent subnetwork output; only decide "
             "layers may do that");
      }
      post_top.insert(name);
    }
  }

  // Assemble the schedule. The global topo order interleaves top-level and
  // subnet entries consistently with base: edges.
  for (const auto& q : an.deps().topo_order) {
    bool sub_scope = an.in_subnet(q);
    std::string local = sub_scope ? q.substr(q.find('/') + 1) : q;
    if (!sub_scope && has_sub && local == g.cfg.subnet_name) continue;  // container
    GraphNode node = make_node(q, local, sub_scope);
    if (!sub_scope && post_top.count(local)) {
      g.post_loop.push_back(std::move(node));
    } else if (!has_sub) {
      g.pre_loop.push_back(std::move(node));
    } else if (sub_scope && node.hoist_class_loop) {
      g.loop_body.push_back(std::move(node));
    } else if (opts.hoist) {
      g.pre_loop.push_back(std::move(node));
    } else {
      // Naive schedule: everything that could hoist runs inside the loop.
      g.loop_body.push_back(std::move(node));
    }
  }
  if (!opts.hoist && has_sub) {
    // Keep the loop body in dependency order: the pre-loop-eligible entries
    // were appended in topo order already; stable-partition preserves it.
    std::stable_sort(g.loop_body.begin(), g.loop_body.end(),
                     [&](const GraphNode& a, const GraphNode& b) {
                       auto pos = [&](const GraphNode& n) {
                         const auto& order = an.deps().topo_order;
                         return std::find(order.begin(), order.end(), n.qualified) -
                                order.begin();
                       };
                       return pos(a) < pos(b);
                     });
  }

  // Loss layer.
  auto consider_loss = [&](const std::string& qualified, const LayerSpec& spec) {
    if (spec.loss == "ce") {
      if (!g.loss_layer.empty()) fail("multiple ce losses are not supported");
      g.loss_layer = qualified;
      g.label_smoothing = static_cast<Real>(spec.label_smoothing);
    }
  };
  for (const auto& [name, spec] : g.cfg.layers) {
    if (!spec.is_subnetwork()) consider_loss(name, spec);
  }
  for (const auto& [name, spec] : subnet) consider_loss(an.qualify(name), spec);
  if (mode != ExecMode::Decode && g.loss_layer.empty()) {
    fail("no ce loss in the network; training mode needs one");
  }

  // Parameter manifest: stable across modes and schedules.
  auto add_params = [&](const std::string& qualified, const LayerSpec& spec) {
    const LayerInfo& li = an.info(qualified);
    switch (spec.cls) {
      case LayerClass::Linear:
        if (li.embed_vocab > 0) {
          g.param_manifest.emplace_back(
              qualified + "/W", Shape{{Axis::Feature, li.embed_vocab}, {Axis::Other, li.dim}});
        } else {
          g.param_manifest.emplace_back(
              qualified + "/W", Shape{{Axis::Feature, li.in_dim}, {Axis::Other, li.dim}});
          g.param_manifest.emplace_back(qualified + "/b", Shape{{Axis::Feature, li.dim}});
        }
        break;
      case LayerClass::Rec:
      case LayerClass::RnnCell: {
        std::int64_t h = li.dim;
        g.param_manifest.emplace_back(qualified + "/W",
                                      Shape{{Axis::Feature, li.in_dim}, {Axis::Other, 4 * h}});
        g.param_manifest.emplace_back(qualified + "/R",
                                      Shape{{Axis::Feature, h}, {Axis::Other, 4 * h}});
        g.param_manifest.emplace_back(qualified + "/b", Shape{{Axis::Feature, 4 * h}});
        break;
      }
      case LayerClass::Softmax:
        g.param_manifest.emplace_back(qualified + "/W",
                                      Shape{{Axis::Feature, li.in_dim}, {Axis::Other, li.dim}});
        g.param_manifest.emplace_back(qualified + "/b", Shape{{Axis::Feature, li.dim}});
        break;
      default:
        break;
    }
  };
  for (const auto& [name, spec] : g.cfg.layers) {
    if (!spec.is_subnetwork()) add_params(name, spec);
  }
  for (const auto& [name, spec] : subnet) add_params(an.qualify(name), spec);
  std::sort(g.param_manifest.begin(), g.param_manifest.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  return g;
}

// ---------------------------------------------------------------------------
// Shared layer evaluation
// ---------------------------------------------------------------------------

namespace {

struct LayerValue {
  NodeId node = kNoNode;
  bool is_log_probs = false;
  std::optional<IdTensor> ids;
  bool is_ids() const { return ids.has_value(); }
};

struct EvalContext {
  Tape& tape;
  const CompiledGraph& g;
  ParamStore& params;
  std::uint64_t seed = 1;
  std::uint64_t batch_counter = 0;
  bool dropout_on = true;
  std::map<std::string, NodeId> bound;

  NodeId pnode(const std::string& name) {
    auto it = bound.find(name);
    if (it != bound.end()) return it->second;
    NodeId id = tape.param(name, params.at(name));
    bound.emplace(name, id);
    return id;
  }
};

EwKind activation_kind(const std::string& name) {
  if (name == "tanh") return EwKind::Tanh;
  if (name == "sigmoid") return EwKind::Sigmoid;
  if (name == "relu") return EwKind::Relu;
  if (name == "exp") return EwKind::Exp;
  if (name == "log") return EwKind::Log;
  throw CompileError("unknown activation '" + name + "'");
}

// Applies the layer's input dropout to one resolved tensor input.
NodeId dropped_input(EvalContext& ctx, const GraphNode& node, std::size_t input_index,
                     NodeId value, std::int64_t step_tag) {
  double rate = node.spec->dropout;
  if (rate <= 0.0 || !ctx.dropout_on) return value;
  DropoutKey key{mix64(mix64(ctx.seed, fnv1a(node.qualified + "#" + std::to_string(input_index))),
                       ctx.batch_counter)};
  return ctx.tape.dropout(value, static_cast<Real>(rate), key, step_tag, true);
}

// Evaluates one layer given resolved inputs. rnn state is passed for
// rnn_cell layers; new_cell receives the updated cell node.
LayerValue eval_layer(EvalContext& ctx, const GraphNode& node, std::vector<LayerValue> inputs,
                      std::int64_t step_tag, const LayerValue* rnn_h = nullptr,
                      NodeId rnn_c = kNoNode, NodeId* new_cell = nullptr) {
  Tape& t = ctx.tape;
  const LayerSpec& spec = *node.spec;

  // Probability semantics: a softmax value consumed by a downstream tensor
  // layer materializes as exp(log_probs).
  auto as_tensor = [&](LayerValue& v) {
    if (v.is_log_probs) {
      v.node = t.exp(v.node);
      v.is_log_probs = false;
    }
    return v.node;
  };

  switch (spec.cls) {
    case LayerClass::Linear: {
      if (inputs.size() == 1 && inputs[0].is_ids()) {
        NodeId table = ctx.pnode(node.qualified + "/W");
        NodeId out = t.gather_rows(table, *inputs[0].ids, node.qualified);
        if (!spec.activation.empty()) out = t.unary(activation_kind(spec.activation), out);
        return {out};
      }
      std::vector<NodeId> parts;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        parts.push_back(dropped_input(ctx, node, i, as_tensor(inputs[i]), step_tag));
      }
      NodeId x = t.concat_feature(parts);
      NodeId y = t.add(t.matmul(x, ctx.pnode(node.qualified + "/W")),
                       ctx.pnode(node.qualified + "/b"));
      if (!spec.activation.empty()) y = t.unary(activation_kind(spec.activation), y);
      return {y};
    }
    case LayerClass::Rec: {
      std::vector<NodeId> parts;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        parts.push_back(dropped_input(ctx, node, i, as_tensor(inputs[i]), step_tag));
      }
      NodeId x = t.concat_feature(parts);
      return {lstm_sequence(t, ctx.pnode(node.qualified + "/W"), ctx.pnode(node.qualified + "/R"),
                            ctx.pnode(node.qualified + "/b"), x, spec.direction)};
    }
    case LayerClass::Copy: {
      std::vector<NodeId> parts;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        parts.push_back(dropped_input(ctx, node, i, as_tensor(inputs[i]), step_tag));
      }
      return {t.concat_feature(parts)};
    }
    case LayerClass::Combine: {
      NodeId acc = kNoNode;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        NodeId v = dropped_input(ctx, node, i, as_tensor(inputs[i]), step_tag);
        if (acc == kNoNode) {
          acc = v;
        } else {
          acc = spec.kind == "mul" ? t.mul(acc, v) : t.add(acc, v);
        }
      }
      return {acc};
    }
    case LayerClass::Activation: {
      NodeId v = dropped_input(ctx, node, 0, as_tensor(inputs[0]), step_tag);
      return {t.unary(activation_kind(spec.activation), v)};
    }
    case LayerClass::SoftmaxOverSpatial: {
      NodeId v = dropped_input(ctx, node, 0, as_tensor(inputs[0]), step_tag);
      return {t.softmax_over_spatial(v)};
    }
    case LayerClass::GenericAttention: {
      // inputs = [weights, base]
      return {t.generic_attention(as_tensor(inputs[0]), as_tensor(inputs[1]))};
    }
    case LayerClass::RnnCell: {
      std::vector<NodeId> parts;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        parts.push_back(dropped_input(ctx, node, i, as_tensor(inputs[i]), step_tag));
      }
      NodeId x = t.concat_feature(parts);
      auto out = t.lstm_step(ctx.pnode(node.qualified + "/W"), ctx.pnode(node.qualified + "/R"),
                             ctx.pnode(node.qualified + "/b"), x, rnn_h->node, rnn_c);
      if (new_cell) *new_cell = out.c;
      return {out.h};
    }
    case LayerClass::Softmax: {
      std::vector<NodeId> parts;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        parts.push_back(dropped_input(ctx, node, i, as_tensor(inputs[i]), step_tag));
      }
      NodeId x = t.concat_feature(parts);
      NodeId y = t.add(t.matmul(x, ctx.pnode(node.qualified + "/W")),
                       ctx.pnode(node.qualified + "/b"));
      LayerValue v;
      v.node = t.log_softmax(y);
      v.is_log_probs = true;
      return v;
    }
    case LayerClass::Decide: {
      return inputs[0];  // pass-through; evaluation happens in the beam decoder
    }
    case LayerClass::Choice:
    case LayerClass::Subnetwork:
      throw CompileError("internal: layer '" + node.qualified + "' reached eval_layer");
  }
  throw CompileError("internal: unhandled class");
}

// Zero/initial value for a loop-carried layer.
LayerValue initial_value(EvalContext& ctx, const CompiledGraph& g, const GraphNode& node,
                         std::int64_t rows, std::int64_t t_src,
                         const std::optional<std::vector<std::int32_t>>& src_lens) {
  if (node.is_ids) {
    std::int32_t token =
        node.spec->initial_output ? static_cast<std::int32_t>(*node.spec->initial_output) : 0;
    IdTensor ids = IdTensor::zeros({{Axis::Batch, rows}});
    std::fill(ids.data().begin(), ids.data().end(), token);
    return {kNoNode, false, std::move(ids)};
  }
  Real fill = node.spec->initial_output ? static_cast<Real>(*node.spec->initial_output) : Real(0);
  Tensor init;
  if (node.carries_src_time) {
    init = Tensor::full({{Axis::Batch, rows}, {Axis::Time, t_src}, {Axis::Feature, node.feature_dim}},
                        fill);
    if (src_lens) init.set_seq_lens(*src_lens);
  } else {
    init = Tensor::full({{Axis::Batch, rows}, {Axis::Feature, node.feature_dim}}, fill);
  }
  return {ctx.tape.constant(std::move(init), node.qualified + "@init")};
}

}  // namespace

// ---------------------------------------------------------------------------
// Training execution
// ---------------------------------------------------------------------------

ExecResult execute_training_graph(const CompiledGraph& g, const EncodedBatch& batch,
                                  ParamStore& params, const ExecOptions& opts) {
  if (g.mode == ExecMode::Decode) {
    throw ExecError("execute_training_graph called on a decode-mode graph");
  }
  if (batch.targets.size() == 0) throw ExecError("training execution requires targets");
  if (!batch.targets.seq_lens() && batch.targets.has_axis(Axis::Time)) {
    throw ExecError("targets need seq_lens");
  }

  ExecResult res;
  res.tape = std::make_unique<Tape>(true);
  EvalContext ctx{*res.tape, g, params, opts.seed, opts.batch_counter, opts.dropout_enabled};

  const std::int64_t B = batch.src.extent(Axis::Batch);
  const std::int64_t T_src = batch.src.extent(Axis::Time);
  const std::int64_t T_trg = batch.targets.extent(Axis::Time);
  const auto& src_lens = batch.src.seq_lens();

  std::map<std::string, LayerValue> pre;

  // Resolver for pre-loop (full-rank) evaluation.
  auto resolve_pre = [&](const GraphNode& node, const LayerRef& r) -> LayerValue {
    if (r.kind == RefKind::Prev) {
      throw ExecError("internal: prev: reference in pre-loop node " + node.qualified);
    }
    std::string q;
    if (r.kind == RefKind::Base) {
      q = r.name;
    } else if (node.in_subnet) {
      q = g.cfg.subnet_name + "/" + r.name;
    } else {
      if (r.name == "data") {
        LayerValue v;
        v.ids = batch.src;
        return v;
      }
      q = r.name;
    }
    auto it = pre.find(q);
    if (it == pre.end()) throw ExecError("internal: unresolved pre-loop value " + q);
    return it->second;
  };

  for (const auto& node : g.pre_loop) {
    if (node.spec->cls == LayerClass::Choice) {
      // Train mode: the full label sequence is known upfront.
      LayerValue v;
      v.ids = batch.targets;
      pre[node.qualified] = std::move(v);
      continue;
    }
    std::vector<LayerValue> inputs;
    if (node.spec->cls == LayerClass::GenericAttention) {
      inputs.push_back(resolve_pre(node, parse_ref(node.spec->weights)));
      inputs.push_back(resolve_pre(node, parse_ref(node.spec->base)));
    } else {
      for (const auto& r : node.spec->from) inputs.push_back(resolve_pre(node, r));
    }
    LayerValue v = eval_layer(ctx, node, std::move(inputs), kStaticStep);
    if (v.node != kNoNode) ctx.tape.set_tag(v.node, node.qualified);
    pre[node.qualified] = std::move(v);
    res.pre_values[node.qualified] = pre[node.qualified].node;
  }

  NodeId loss = kNoNode;
  if (g.has_loop()) {
    std::map<std::string, LayerValue> carried;
    std::map<std::string, NodeId> cells;
    std::vector<NodeId> loss_steps;
    std::string loss_local;
    if (!g.loss_layer.empty()) {
      auto slash = g.loss_layer.find('/');
      loss_local = slash == std::string::npos ? g.loss_layer : g.loss_layer.substr(slash + 1);
    }

    for (std::int64_t t = 0; t < T_trg; ++t) {
      std::map<std::string, LayerValue> scope;
      std::map<std::string, LayerValue> slice_cache;

      std::function<LayerValue(const GraphNode&, const LayerRef&)> resolve =
          [&](const GraphNode& node, const LayerRef& r) -> LayerValue {
        if (r.kind == RefKind::Prev) {
          auto it = carried.find(r.name);
          if (it != carried.end()) return it->second;
          const GraphNode* target = g.find_node(g.cfg.subnet_name + "/" + r.name);
          if (!target) throw ExecError("internal: prev target missing " + r.name);
          LayerValue init = initial_value(ctx, g, *target, B, T_src, src_lens);
          carried[r.name] = init;
          return init;
        }
        std::string q;
        bool top_scope = false;
        if (r.kind == RefKind::Base) {
          q = r.name;
          top_scope = true;
        } else if (node.in_subnet) {
          q = g.cfg.subnet_name + "/" + r.name;
        } else {
          if (r.name == "data") {
            LayerValue v;
            v.ids = batch.src;
            return v;
          }
          q = r.name;
          top_scope = true;
        }
        if (auto it = scope.find(q); it != scope.end()) return it->second;
        if (auto it = slice_cache.find(q); it != slice_cache.end()) return it->second;
        auto it = pre.find(q);
        if (it == pre.end()) throw ExecError("internal: unresolved value " + q);
        const GraphNode* target = g.find_node(q);
        if (!top_scope && target && target->target_dependent) {
          // Hoisted full-target-rank value: take this step's slice.
          LayerValue sliced;
          if (it->second.is_ids()) {
            sliced.ids = it->second.ids->slice_time(t);
          } else {
            sliced.node = ctx.tape.slice_time(it->second.node, t);
            sliced.is_log_probs = it->second.is_log_probs;
          }
          slice_cache[q] = sliced;
          return sliced;
        }
        return it->second;
      };

      for (const auto& node : g.loop_body) {
        // Dropout keying follows the hoisting classification, not the actual
        // schedule: values that could run once per batch draw the same masks
        // whether or not they were hoisted.
        std::int64_t tag;
        if (!node.in_subnet) {
          tag = kStaticStep;  // naive schedule recomputing a top-level layer
        } else if (node.hoist_class_loop || node.target_dependent) {
          tag = t;
        } else {
          tag = kStaticStep;  // loop-invariant subnet layer under naive schedule
        }
        if (node.spec->cls == LayerClass::Choice) {
          IdTensor true_t = batch.targets.slice_time(t);
          if (g.mode == ExecMode::ScheduledSampling && opts.scheduled_sampling_p > 0.0) {
            LayerValue in = resolve(node, node.spec->from[0]);
            if (!in.is_log_probs) {
              throw ExecError("choice layer input must be a softmax in scheduled sampling");
            }
            ChoicePolicy policy;
            policy.kind = ChoicePolicy::Sample;
            policy.p = opts.scheduled_sampling_p;
            policy.sample_key =
                mix64(mix64(ctx.seed, fnv1a("ss/" + node.qualified)), ctx.batch_counter);
            LayerValue v;
            v.ids = choice_select(policy, ctx.tape.value(in.node), true_t, t);
            scope[node.qualified] = std::move(v);
          } else {
            LayerValue v;
            v.ids = std::move(true_t);
            scope[node.qualified] = std::move(v);
          }
          continue;
        }
        std::vector<LayerValue> inputs;
        if (node.spec->cls == LayerClass::GenericAttention) {
          inputs.push_back(resolve(node, parse_ref(node.spec->weights)));
          inputs.push_back(resolve(node, parse_ref(node.spec->base)));
        } else {
          for (const auto& r : node.spec->from) inputs.push_back(resolve(node, r));
        }
        LayerValue v;
        if (node.spec->cls == LayerClass::RnnCell) {
          LayerValue h_prev;
          if (auto it = carried.find(node.local); it != carried.end()) {
            h_prev = it->second;
          } else {
            h_prev = initial_value(ctx, g, node, B, T_src, src_lens);
          }
          NodeId c_prev = kNoNode;
          if (auto it = cells.find(node.local); it != cells.end()) {
            c_prev = it->second;
          } else {
            c_prev = ctx.tape.constant(
                Tensor::zeros({{Axis::Batch, B}, {Axis::Feature, node.feature_dim}}),
                node.qualified + "@cell_init");
          }
          NodeId new_cell = kNoNode;
          v = eval_layer(ctx, node, std::move(inputs), tag, &h_prev, c_prev, &new_cell);
          cells[node.local] = new_cell;
        } else {
          v = eval_layer(ctx, node, std::move(inputs), tag);
        }
        if (v.node != kNoNode) {
          ctx.tape.set_tag(v.node, node.qualified + "@t" + std::to_string(t));
        }
        scope[node.qualified] = std::move(v);
      }

      // Update loop-carried state.
      for (const auto& name : g.loop_carried) {
        auto it = scope.find(g.cfg.subnet_name + "/" + name);
        if (it != scope.end()) carried[name] = it->second;
      }
      if (!loss_local.empty()) {
        auto it = scope.find(g.loss_layer);
        if (it != scope.end()) loss_steps.push_back(it->second.node);
      }
      std::map<std::string, NodeId> step_nodes;
      for (const auto& [q, v] : scope) {
        if (v.node != kNoNode) step_nodes[q] = v.node;
      }
      res.step_values.push_back(std::move(step_nodes));
    }

    if (!loss_steps.empty()) {
      std::optional<std::vector<std::int32_t>> trg_lens = batch.targets.seq_lens();
      res.stacked_log_probs = ctx.tape.stack_time(loss_steps, trg_lens);
      Real eps = opts.label_smoothing_override >= 0.0
                     ? static_cast<Real>(opts.label_smoothing_override)
                     : g.label_smoothing;
      loss = ctx.tape.ce_label_smoothing(res.stacked_log_probs, batch.targets, eps, g.loss_layer);
    }
  } else if (!g.loss_layer.empty()) {
    // No recurrent loop: the loss softmax runs at full rank over its Time axis.
    auto it = pre.find(g.loss_layer);
    if (it == pre.end() || !it->second.is_log_probs) {
      throw ExecError("loss layer '" + g.loss_layer + "' not evaluated");
    }
    res.stacked_log_probs = it->second.node;
    Real eps = opts.label_smoothing_override >= 0.0
                   ? static_cast<Real>(opts.label_smoothing_override)
                   : g.label_smoothing;
    loss = ctx.tape.ce_label_smoothing(res.stacked_log_probs, batch.targets, eps, g.loss_layer);
  }

  if (loss == kNoNode) throw ExecError("no loss computed");
  res.loss = loss;
  res.loss_value = static_cast<double>(ctx.tape.value(loss).scalar_value());
  if (!std::isfinite(res.loss_value)) {
    auto bad = ctx.tape.find_non_finite();
    std::string where = bad ? bad->second : "<unknown>";
    throw ExecError("non-finite loss; first non-finite value at '" + where + "'");
  }
  std::int64_t tokens = 0;
  if (batch.targets.seq_lens()) {
    for (auto l : *batch.targets.seq_lens()) tokens += l;
  } else {
    tokens = batch.targets.size();
  }
  res.target_tokens = tokens;
  return res;
}

// ---------------------------------------------------------------------------
// Decode execution
// ---------------------------------------------------------------------------

void LoopState::gather(const std::vector<std::int64_t>& parent_rows) {
  auto gather_tensor = [&](const Tensor& src) {
    std::int64_t per_row = src.size() / rows;
    Tensor out = src;  // shape copy
    auto dst = out.data();
    const auto in = src.data();
    for (std::size_t i = 0; i < parent_rows.size(); ++i) {
      std::copy(in.begin() + parent_rows[i] * per_row,
                in.begin() + (parent_rows[i] + 1) * per_row,
                dst.begin() + static_cast<std::int64_t>(i) * per_row);
    }
    return out;
  };
  for (auto& [name, t] : carried) t = gather_tensor(t);
  for (auto& [name, t] : cells) t = gather_tensor(t);
  if (feedback.size() == rows) {
    IdTensor out = feedback;
    for (std::size_t i = 0; i < parent_rows.size(); ++i) {
      out.data()[i] = feedback.data()[static_cast<std::size_t>(parent_rows[i])];
    }
    feedback = std::move(out);
  }
  for (auto& [name, t] : prev_scope) t = gather_tensor(t);
}

namespace {

Tensor tile_rows(const Tensor& t, std::int64_t beam) {
  if (beam == 1) return t;
  if (!t.has_axis(Axis::Batch)) return t;
  std::int64_t b = t.extent(Axis::Batch);
  Shape s = t.shape();
  for (auto& d : s) {
    if (d.axis == Axis::Batch) d.extent = b * beam;
  }
  Tensor out = Tensor::zeros(s);
  std::int64_t per_row = t.size() / b;
  const auto in = t.data();
  auto dst = out.data();
  for (std::int64_t r = 0; r < b; ++r) {
    for (std::int64_t k = 0; k < beam; ++k) {
      std::copy(in.begin() + r * per_row, in.begin() + (r + 1) * per_row,
                dst.begin() + (r * beam + k) * per_row);
    }
  }
  if (t.seq_lens()) {
    std::vector<std::int32_t> lens;
    for (auto l : *t.seq_lens()) {
      for (std::int64_t k = 0; k < beam; ++k) lens.push_back(l);
    }
    out.set_seq_lens(lens);
  }
  return out;
}

}  // namespace

LoopState init_decode_state(const CompiledGraph& g, const IdTensor& src, ParamStore& params,
                            std::int64_t beam_width) {
  if (g.mode != ExecMode::Decode) {
    throw ExecError("init_decode_state requires a decode-mode graph");
  }
  if (src.size() == 0) throw ExecError("empty source batch");
  LoopState state;
  state.rows = src.extent(Axis::Batch) * beam_width;

  Tape tape(false);
  EvalContext ctx{tape, g, params, 0, 0, false};
  std::map<std::string, LayerValue> pre;
  auto resolve_pre = [&](const GraphNode& node, const LayerRef& r) -> LayerValue {
    if (r.kind == RefKind::Prev) {
      throw ExecError("internal: prev: in decode pre-loop");
    }
    std::string q = r.kind == RefKind::Base
                        ? r.name
                        : (node.in_subnet ? g.cfg.subnet_name + "/" + r.name : r.name);
    if (!node.in_subnet && r.kind == RefKind::Plain && r.name == "data") {
      LayerValue v;
      v.ids = src;
      return v;
    }
    auto it = pre.find(q);
    if (it == pre.end()) throw ExecError("internal: unresolved decode pre value " + q);
    return it->second;
  };
  for (const auto& node : g.pre_loop) {
    std::vector<LayerValue> inputs;
    if (node.spec->cls == LayerClass::GenericAttention) {
      inputs.push_back(resolve_pre(node, parse_ref(node.spec->weights)));
      inputs.push_back(resolve_pre(node, parse_ref(node.spec->base)));
    } else {
      for (const auto& r : node.spec->from) inputs.push_back(resolve_pre(node, r));
    }
    pre[node.qualified] = eval_layer(ctx, node, std::move(inputs), kStaticStep);
  }
  // Tile every pre-loop tensor value over the beam; log-prob flags do not
  // survive into the env (softmax layers consumed in-loop are loop nodes).
  for (const auto& [q, v] : pre) {
    if (v.node != kNoNode) {
      Tensor tv = tape.value(v.node);
      state.env.emplace(q, tile_rows(tv, beam_width));
    }
  }

  // Initial feedback token (the choice layer's initial_output, default 0).
  const GraphNode* choice = g.find_node(g.cfg.subnet_name + "/" + g.choice_layer);
  std::int32_t init_token =
      choice && choice->spec->initial_output ? static_cast<std::int32_t>(*choice->spec->initial_output)
                                             : 0;
  state.feedback = IdTensor::zeros({{Axis::Batch, state.rows}});
  std::fill(state.feedback.data().begin(), state.feedback.data().end(), init_token);

  // Source lens tiled for loop-carried values that span source time.
  if (src.seq_lens()) {
    std::vector<std::int32_t> lens;
    for (auto l : *src.seq_lens()) {
      for (std::int64_t k = 0; k < beam_width; ++k) lens.push_back(l);
    }
    state.src_lens = lens;
  }
  state.t_src = src.extent(Axis::Time);
  return state;
}

Tensor step_decoder(const CompiledGraph& g, LoopState& state, const IdTensor& feedback_tokens,
                    ParamStore& params) {
  if (g.mode != ExecMode::Decode) throw ExecError("step_decoder requires a decode-mode graph");
  Tape tape(false);
  EvalContext ctx{tape, g, params, 0, 0, false};

  const std::int64_t rows = state.rows;
  std::optional<std::vector<std::int32_t>> src_lens = state.src_lens;

  std::map<std::string, LayerValue> scope;

  auto env_value = [&](const std::string& q) -> LayerValue {
    auto it = state.env.find(q);
    if (it == state.env.end()) throw ExecError("internal: missing env value " + q);
    LayerValue v;
    v.node = tape.constant(it->second, q);
    return v;
  };

  auto carried_value = [&](const std::string& local) -> LayerValue {
    const GraphNode* target = g.find_node(g.cfg.subnet_name + "/" + local);
    if (!target) throw ExecError("internal: unknown prev target " + local);
    if (target->spec->cls == LayerClass::Choice) {
      LayerValue v;
      v.ids = state.feedback;
      return v;
    }
    auto it = state.carried.find(local);
    if (it != state.carried.end()) {
      LayerValue v;
      v.node = tape.constant(it->second, local + "@carried");
      return v;
    }
    EvalContext init_ctx{tape, g, params, 0, 0, false};
    return initial_value(init_ctx, g, *target, rows, state.t_src, src_lens);
  };

  std::function<LayerValue(const GraphNode&, const LayerRef&)> resolve =
      [&](const GraphNode& node, const LayerRef& r) -> LayerValue {
    if (r.kind == RefKind::Prev) return carried_value(r.name);
    if (r.kind == RefKind::Base) return env_value(r.name);
    std::string q = node.in_subnet ? g.cfg.subnet_name + "/" + r.name : r.name;
    if (auto it = scope.find(q); it != scope.end()) return it->second;
    return env_value(q);
  };

  auto eval_node = [&](const GraphNode& node) {
    std::vector<LayerValue> inputs;
    if (node.spec->cls == LayerClass::GenericAttention) {
      inputs.push_back(resolve(node, parse_ref(node.spec->weights)));
      inputs.push_back(resolve(node, parse_ref(node.spec->base)));
    } else {
      for (const auto& r : node.spec->from) inputs.push_back(resolve(node, r));
    }
    LayerValue v;
    if (node.spec->cls == LayerClass::RnnCell) {
      LayerValue h_prev = carried_value(node.local);
      NodeId c_prev;
      if (auto it = state.cells.find(node.local); it != state.cells.end()) {
        c_prev = tape.constant(it->second, node.local + "@cell");
      } else {
        c_prev = tape.constant(
            Tensor::zeros({{Axis::Batch, rows}, {Axis::Feature, node.feature_dim}}));
      }
      NodeId new_cell = kNoNode;
      v = eval_layer(ctx, node, std::move(inputs), kStaticStep, &h_prev, c_prev, &new_cell);
      state.cells[node.local] = tape.value(new_cell);
    } else {
      v = eval_layer(ctx, node, std::move(inputs), kStaticStep);
    }
    scope[node.qualified] = std::move(v);
  };

  // Complete the previous step's choice-dependent layers from the fed
  // tokens so prev: references to them resolve at this step. At t = 0 the
  // initial-output rules stand in for them.
  if (state.t > 0) {
    std::map<std::string, LayerValue> back_scope;
    for (const auto& node : g.loop_body) {
      if (!g.choice_dependent.count(node.local)) continue;
      if (node.spec->cls == LayerClass::Choice) {
        LayerValue v;
        v.ids = feedback_tokens;
        back_scope[node.qualified] = std::move(v);
        continue;
      }
      std::vector<LayerValue> inputs;
      auto back_resolve = [&](const LayerRef& r) -> LayerValue {
        if (r.kind == RefKind::Base) return env_value(r.name);
        if (r.kind == RefKind::Prev) {
          throw ExecError("internal: prev inside choice-dependent group");
        }
        std::string q = g.cfg.subnet_name + "/" + r.name;
        if (auto it = back_scope.find(q); it != back_scope.end()) return it->second;
        // A value from the previous step's main scope.
        auto ps = state.prev_scope.find(r.name);
        if (ps != state.prev_scope.end()) {
          LayerValue v;
          v.node = tape.constant(ps->second, q + "@prevstep");
          return v;
        }
        return env_value(q);
      };
      if (node.spec->cls == LayerClass::GenericAttention) {
        inputs.push_back(back_resolve(parse_ref(node.spec->weights)));
        inputs.push_back(back_resolve(parse_ref(node.spec->base)));
      } else {
        for (const auto& r : node.spec->from) inputs.push_back(back_resolve(r));
      }
      LayerValue v = eval_layer(ctx, node, std::move(inputs), kStaticStep);
      back_scope[node.qualified] = v;
      if (g.loop_carried.count(node.local) && v.node != kNoNode) {
        state.carried[node.local] = tape.value(v.node);
      }
    }
    state.feedback = feedback_tokens;
  }

  // Current step: every loop-body layer that does not depend on the choice.
  std::string logits_layer;
  {
    const LayerSpec* choice_spec = nullptr;
    for (const auto& node : g.loop_body) {
      if (node.spec->cls == LayerClass::Choice) choice_spec = node.spec;
    }
    if (!choice_spec || choice_spec->from.empty()) {
      throw ExecError("decode graph has no choice layer input");
    }
    logits_layer = choice_spec->from[0].name;
  }
  for (const auto& node : g.loop_body) {
    if (g.choice_dependent.count(node.local)) continue;
    eval_node(node);
  }

  auto logit_it = scope.find(g.cfg.subnet_name + "/" + logits_layer);
  if (logit_it == scope.end() || !logit_it->second.is_log_probs) {
    throw ExecError("choice input '" + logits_layer + "' did not produce log-probs");
  }
  Tensor log_probs = tape.value(logit_it->second.node);

  // Persist this step's values for the carried state and the next step's
  // choice-dependent group.
  state.prev_scope.clear();
  for (const auto& [q, v] : scope) {
    if (v.node == kNoNode) continue;
    std::string local = q.substr(q.find('/') + 1);
    state.prev_scope[local] = tape.value(v.node);
    if (g.loop_carried.count(local)) state.carried[local] = tape.value(v.node);
  }
  state.t++;
  return log_probs;
}

std::string format_schedule(const CompiledGraph& g) {
  std::ostringstream os;
  os << "mode: " << exec_mode_name(g.mode) << (g.hoisted ? "" : " (no-hoist)") << "\n";
  auto dump = [&](const char* title, const std::vector<GraphNode>& nodes) {
    os << title << ":\n";
    for (const auto& n : nodes) os << "  " << n.qualified << "\n";
  };
  dump("pre_loop", g.pre_loop);
  dump("loop_body", g.loop_body);
  dump("post_loop", g.post_loop);
  if (!g.loss_layer.empty() && g.mode != ExecMode::Decode) {
    os << "  ce_loss(" << g.loss_layer << ")\n";
  }
  return os.str();
}

}  // namespace seqloom
