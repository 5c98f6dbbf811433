// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace seqloom {

// Declarative network description: a dictionary of layers wired by name.
// References may be plain ("name"), recurrent ("prev:name", legal only
// inside the recurrent subnetwork), or cross-scope ("base:name", reaching
// from the subnetwork into the enclosing scope). "data" names the network
// input (source token ids).

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LayerClass {
  Linear,
  Rec,
  Copy,
  Combine,
  Activation,
  SoftmaxOverSpatial,
  GenericAttention,
  RnnCell,
  Choice,
  Softmax,
  Decide,
  Subnetwork,
};

const char* layer_class_name(LayerClass c);

enum class RefKind { Plain, Prev, Base };

struct LayerRef {
  RefKind kind = RefKind::Plain;
  std::string name;
  friend bool operator==(const LayerRef&, const LayerRef&) = default;
};

LayerRef parse_ref(const std::string& text);
std::string ref_to_string(const LayerRef& r);

struct LayerSpec {
  std::string name;
  LayerClass cls = LayerClass::Copy;
  std::vector<LayerRef> from;
  bool from_given = false;  // absent "from" defaults to the input data at top level

  std::optional<std::int64_t> n_out;
  int direction = 1;
  std::string unit;        // canonical cell name for rec/rnn_cell ("lstm")
  std::string kind;        // combine: "add" | "mul"
  std::string activation;  // activation layers / linear activation attr
  double dropout = 0.0;
  std::string loss;  // "", "ce", "bleu"
  double label_smoothing = 0.0;
  std::optional<double> initial_output;
  std::string weights;  // generic_attention
  std::string base;     // generic_attention (may be "base:...")

  // Populated when this layer is the recurrent subnetwork (class rec with a
  // dictionary unit).
  std::map<std::string, LayerSpec> subnet;
  bool is_subnetwork() const { return !subnet.empty(); }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkConfig {
  std::map<std::string, LayerSpec> layers;

  // Name of the recurrent subnetwork layer, empty when there is none.
  std::string subnet_name;

  const LayerSpec* find(const std::string& name) const {
    auto it = layers.find(name);
    return it == layers.end() ? nullptr : &it->second;
  }
  const LayerSpec* find_in_subnet(const std::string& name) const {
    if (subnet_name.empty()) return nullptr;
    const auto& sub = layers.at(subnet_name).subnet;
    auto it = sub.find(name);
    return it == sub.end() ? nullptr : &it->second;
  }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct Diagnostic {
  std::string layer;
  std::string message;
};

enum class EdgeLabel { Plain, Prev, Base };

struct DepEdge {
  std::string from;  // producer (qualified name, subnet layers as "rec/name")
  std::string to;    // consumer
  EdgeLabel label = EdgeLabel::Plain;
  friend bool operator==(const DepEdge&, const DepEdge&) = default;
};

struct DepGraph {
  std::vector<std::string> nodes;       // qualified layer names
  std::vector<DepEdge> edges;           // labeled, config-derived
  std::vector<std::string> topo_order;  // linear extension of plain(+base) edges
};

// Parses the strict-JSON document {"network": {...}}. Throws ConfigError on
// syntax errors (with position info), unknown classes or attributes, missing
// required attributes, and any failed validation invariant.
NetworkConfig parse_network_config(const std::string& text);

// Semantic checks on a parsed config; empty result means all invariants hold.
std::vector<Diagnostic> validate_config(const NetworkConfig& cfg);

// Builds the labeled dependency graph and a deterministic topological order
// of the plain-edge subgraph (lexicographic tie-break).
DepGraph resolve_references(const NetworkConfig& cfg);

// Re-emits the config as a canonical JSON document (2-space indent, sorted
// keys). parse(serialize(parse(x))) == parse(x).
std::string serialize_network_config(const NetworkConfig& cfg);

}  // namespace seqloom
