// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#include "seqloom/config.hpp"

#include <json.hpp>

#include <algorithm>
#include <set>
#include <sstream>

namespace seqloom {

using nlohmann::json;

namespace {

const std::map<std::string, LayerClass>& class_names() {
  static const std::map<std::string, LayerClass> names = {
      {"linear", LayerClass::Linear},
      {"rec", LayerClass::Rec},
      {"copy", LayerClass::Copy},
      {"combine", LayerClass::Combine},
      {"activation", LayerClass::Activation},
      {"softmax_over_spatial", LayerClass::SoftmaxOverSpatial},
      {"generic_attention", LayerClass::GenericAttention},
      {"rnn_cell", LayerClass::RnnCell},
      {"choice", LayerClass::Choice},
      {"softmax", LayerClass::Softmax},
      {"decide", LayerClass::Decide},
      {"subnetwork", LayerClass::Subnetwork},
  };
  return names;
}

// Cell-name aliases; the kernel-specific spellings map onto the one LSTM
// implementation here.
const std::map<std::string, std::string>& unit_aliases() {
  static const std::map<std::string, std::string> aliases = {
      {"lstm", "lstm"},
      {"nativelstm2", "lstm"},
      {"LSTMBlock", "lstm"},
      {"lstmblock", "lstm"},
  };
  return aliases;
}

const std::set<std::string>& allowed_attrs(LayerClass c) {
  static const std::set<std::string> common = {"class", "from"};
  static const std::map<LayerClass, std::set<std::string>> per_class = {
      {LayerClass::Linear, {"n_out", "activation", "dropout", "initial_output"}},
      {LayerClass::Rec, {"unit", "n_out", "direction", "dropout", "initial_output"}},
      {LayerClass::Copy, {"dropout"}},
      {LayerClass::Combine, {"kind", "dropout"}},
      {LayerClass::Activation, {"activation", "dropout"}},
      {LayerClass::SoftmaxOverSpatial, {"dropout"}},
      {LayerClass::GenericAttention, {"weights", "base"}},
      {LayerClass::RnnCell, {"unit", "n_out", "dropout", "initial_output"}},
      {LayerClass::Choice, {"initial_output"}},
      {LayerClass::Softmax, {"n_out", "dropout", "loss", "loss_opts", "initial_output"}},
      {LayerClass::Decide, {"loss"}},
      {LayerClass::Subnetwork, {"unit", "n_out"}},
  };
  static std::map<LayerClass, std::set<std::string>> merged = [] {
    std::map<LayerClass, std::set<std::string>> m;
    for (const auto& [cls, attrs] : per_class) {
      std::set<std::string> s = common;
      s.insert(attrs.begin(), attrs.end());
      m[cls] = std::move(s);
    }
    return m;
  }();
  return merged.at(c);
}

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

double require_number(const json& v, const std::string& attr, const std::string& layer) {
  if (!v.is_number()) {
    fail("attribute '" + attr + "' of layer '" + layer + "' must be a number");
  }
  return v.get<double>();
}

LayerSpec parse_layer(const std::string& name, const json& obj, bool in_subnet);

void parse_subnet(LayerSpec& spec, const json& unit, const std::string& name) {
  for (auto it = unit.begin(); it != unit.end(); ++it) {
    LayerSpec inner = parse_layer(it.key(), it.value(), true);
    if (inner.is_subnetwork()) {
      fail("layer '" + it.key() + "' nests a subnetwork inside '" + name +
           "'; only one level of recurrent nesting is supported");
    }
    spec.subnet.emplace(it.key(), std::move(inner));
  }
}

LayerSpec parse_layer(const std::string& name, const json& obj, bool in_subnet) {
  if (!obj.is_object()) fail("layer '" + name + "' must be an object");
  if (!obj.contains("class") || !obj["class"].is_string()) {
    fail("layer '" + name + "' is missing the required 'class' attribute");
  }
  const std::string cls_str = obj["class"].get<std::string>();
  auto cit = class_names().find(cls_str);
  if (cit == class_names().end()) {
    fail("unknown class '" + cls_str + "' in layer '" + name + "'");
  }
  LayerSpec spec;
  spec.name = name;
  spec.cls = cit->second;

  // A rec layer whose unit is a dictionary is the recurrent subnetwork.
  if ((spec.cls == LayerClass::Rec || spec.cls == LayerClass::Subnetwork) &&
      obj.contains("unit") && obj["unit"].is_object()) {
    spec.cls = LayerClass::Subnetwork;
  } else if (spec.cls == LayerClass::Subnetwork) {
    fail("layer '" + name + "' has class 'subnetwork' but no dictionary 'unit'");
  }

  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed_attrs(spec.cls).count(it.key())) {
      fail("unknown attribute '" + it.key() + "' for class '" + cls_str + "' in layer '" +
           name + "'");
    }
  }

  if (obj.contains("from")) {
    const json& f = obj["from"];
    if (!f.is_array()) fail("attribute 'from' of layer '" + name + "' must be a list");
    spec.from_given = true;
    for (const auto& e : f) {
      if (!e.is_string()) fail("'from' entries of layer '" + name + "' must be strings");
      spec.from.push_back(parse_ref(e.get<std::string>()));
    }
  } else if (spec.cls == LayerClass::GenericAttention) {
    // inputs come via weights/base
  } else if (!in_subnet) {
    spec.from.push_back(LayerRef{RefKind::Plain, "data"});
  } else {
    fail("layer '" + name + "' inside the subnetwork is missing the required 'from' attribute");
  }

  if (obj.contains("n_out")) {
    const json& v = obj["n_out"];
    if (!v.is_number_integer()) {
      fail("attribute 'n_out' of layer '" + name + "' must be an integer");
    }
    spec.n_out = v.get<std::int64_t>();
  }
  if (obj.contains("direction")) {
    const json& v = obj["direction"];
    if (!v.is_number_integer()) {
      fail("attribute 'direction' of layer '" + name + "' must be an integer");
    }
    spec.direction = v.get<int>();
  }
  if (obj.contains("unit")) {
    const json& v = obj["unit"];
    if (spec.cls == LayerClass::Subnetwork) {
      parse_subnet(spec, v, name);
    } else if (v.is_string()) {
      auto uit = unit_aliases().find(v.get<std::string>());
      if (uit == unit_aliases().end()) {
        fail("unknown unit '" + v.get<std::string>() + "' in layer '" + name + "'");
      }
      spec.unit = uit->second;
    } else {
      fail("attribute 'unit' of layer '" + name + "' must be a string or a layer dictionary");
    }
  }
  if (obj.contains("kind")) {
    if (!obj["kind"].is_string()) fail("attribute 'kind' of layer '" + name + "' must be a string");
    spec.kind = obj["kind"].get<std::string>();
  }
  if (obj.contains("activation")) {
    if (!obj["activation"].is_string()) {
      fail("attribute 'activation' of layer '" + name + "' must be a string");
    }
    spec.activation = obj["activation"].get<std::string>();
  }
  if (obj.contains("dropout")) spec.dropout = require_number(obj["dropout"], "dropout", name);
  if (obj.contains("loss")) {
    if (!obj["loss"].is_string()) fail("attribute 'loss' of layer '" + name + "' must be a string");
    spec.loss = obj["loss"].get<std::string>();
  }
  if (obj.contains("loss_opts")) {
    const json& lo = obj["loss_opts"];
    if (!lo.is_object()) fail("attribute 'loss_opts' of layer '" + name + "' must be an object");
    for (auto it = lo.begin(); it != lo.end(); ++it) {
      if (it.key() == "label_smoothing") {
        spec.label_smoothing = require_number(it.value(), "label_smoothing", name);
      } else {
        fail("unknown loss option '" + it.key() + "' in layer '" + name + "'");
      }
    }
  }
  if (obj.contains("initial_output")) {
    spec.initial_output = require_number(obj["initial_output"], "initial_output", name);
  }
  if (obj.contains("weights")) {
    if (!obj["weights"].is_string()) {
      fail("attribute 'weights' of layer '" + name + "' must be a string");
    }
    spec.weights = obj["weights"].get<std::string>();
  }
  if (obj.contains("base")) {
    if (!obj["base"].is_string()) fail("attribute 'base' of layer '" + name + "' must be a string");
    spec.base = obj["base"].get<std::string>();
  }

  auto require = [&](bool present, const char* attr) {
    if (!present) {
      fail("layer '" + name + "' (class '" + cls_str + "') is missing required attribute '" +
           std::string(attr) + "'");
    }
  };
  switch (spec.cls) {
    case LayerClass::Linear:
      require(spec.n_out.has_value(), "n_out");
      break;
    case LayerClass::Rec:
      require(!spec.unit.empty(), "unit");
      require(spec.n_out.has_value(), "n_out");
      break;
    case LayerClass::RnnCell:
      require(!spec.unit.empty(), "unit");
      require(spec.n_out.has_value(), "n_out");
      break;
    case LayerClass::Combine:
      require(!spec.kind.empty(), "kind");
      break;
    case LayerClass::Activation:
      require(!spec.activation.empty(), "activation");
      break;
    case LayerClass::GenericAttention:
      require(!spec.weights.empty(), "weights");
      require(!spec.base.empty(), "base");
      break;
    default:
      break;
  }
  return spec;
}

}  // namespace

const char* layer_class_name(LayerClass c) {
  for (const auto& [name, cls] : class_names()) {
    if (cls == c) return name.c_str();
  }
  return "?";
}

LayerRef parse_ref(const std::string& text) {
  if (text.rfind("prev:", 0) == 0) return {RefKind::Prev, text.substr(5)};
  if (text.rfind("base:", 0) == 0) return {RefKind::Base, text.substr(5)};
  return {RefKind::Plain, text};
}

std::string ref_to_string(const LayerRef& r) {
  switch (r.kind) {
    case RefKind::Prev: return "prev:" + r.name;
    case RefKind::Base: return "base:" + r.name;
    case RefKind::Plain: return r.name;
  }
  return r.name;
}

NetworkConfig parse_network_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    // nlohmann reports "parse error at line L, column C: ..."
    fail(e.what());
  }
  if (!doc.is_object()) fail("top-level document must be an object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (it.key() != "network") fail("unknown top-level key '" + it.key() + "'");
  }
  if (!doc.contains("network") || !doc["network"].is_object()) {
    fail("document must contain a 'network' object");
  }
  NetworkConfig cfg;
  for (auto it = doc["network"].begin(); it != doc["network"].end(); ++it) {
    cfg.layers.emplace(it.key(), parse_layer(it.key(), it.value(), false));
  }
  for (const auto& [name, spec] : cfg.layers) {
    if (spec.is_subnetwork() && cfg.subnet_name.empty()) cfg.subnet_name = name;
  }
  auto diags = validate_config(cfg);
  if (!diags.empty()) {
    std::ostringstream os;
    os << "invalid network config:";
    for (const auto& d : diags) {
      os << "\n  " << (d.layer.empty() ? std::string("<network>") : d.layer) << ": " << d.message;
    }
    fail(os.str());
  }
  return cfg;
}

namespace {

bool known_activation(const std::string& a) {
  static const std::set<std::string> known = {"tanh", "sigmoid", "relu", "exp", "log"};
  return known.count(a) > 0;
}

// Kahn's pass over plain edges inside one scope; returns one layer on a
// cycle (empty when acyclic).
std::string find_plain_cycle(const std::map<std::string, std::vector<std::string>>& deps) {
  std::map<std::string, int> in_degree;
  std::map<std::string, std::vector<std::string>> consumers;
  for (const auto& [node, inputs] : deps) in_degree[node] = 0;
  for (const auto& [node, inputs] : deps) {
    for (const auto& in : inputs) {
      if (!in_degree.count(in)) continue;  // external source ("data", base scope)
      in_degree[node]++;
      consumers[in].push_back(node);
    }
  }
  std::set<std::string> ready;
  for (const auto& [node, deg] : in_degree) {
    if (deg == 0) ready.insert(node);
  }
  std::size_t visited = 0;
  while (!ready.empty()) {
    std::string n = *ready.begin();
    ready.erase(ready.begin());
    ++visited;
    for (const auto& c : consumers[n]) {
      if (--in_degree[c] == 0) ready.insert(c);
    }
  }
  if (visited == in_degree.size()) return {};
  for (const auto& [node, deg] : in_degree) {
    if (deg > 0) return node;  // lexicographically first remaining node
  }
  return {};
}

void validate_scope(const NetworkConfig& cfg, const std::map<std::string, LayerSpec>& scope,
                    bool is_subnet, std::vector<Diagnostic>& out) {
  auto exists = [&](const std::string& n) { return scope.count(n) > 0; };
  std::map<std::string, std::vector<std::string>> plain_deps;
  for (const auto& [name, spec] : scope) {
    auto& deps = plain_deps[name];
    auto check_ref = [&](const LayerRef& r) {
      switch (r.kind) {
        case RefKind::Plain:
          if (!is_subnet && r.name == "data") return;
          if (is_subnet && r.name == "data") {
            out.push_back({name, "'data' is not addressable inside the subnetwork"});
            return;
          }
          if (!exists(r.name)) {
            out.push_back({name, "reference to unknown layer '" + r.name + "'"});
            return;
          }
          deps.push_back(r.name);
          break;
        case RefKind::Prev:
          if (!is_subnet) {
            out.push_back({name, "prev: reference outside the recurrent subnetwork"});
          } else if (!exists(r.name)) {
            out.push_back({name, "prev: reference to unknown layer '" + r.name + "'"});
          }
          break;
        case RefKind::Base:
          if (!is_subnet) {
            out.push_back({name, "base: reference outside the recurrent subnetwork"});
          } else if (!cfg.layers.count(r.name)) {
            out.push_back({name, "base: reference to unknown top-level layer '" + r.name + "'"});
          }
          break;
      }
    };
    for (const auto& r : spec.from) check_ref(r);
    if (spec.cls == LayerClass::GenericAttention) {
      LayerRef w = parse_ref(spec.weights);
      if (w.kind != RefKind::Plain) {
        out.push_back({name, "'weights' must be a plain same-scope reference"});
      } else {
        check_ref(w);
      }
      check_ref(parse_ref(spec.base));
    }

    if (spec.n_out && *spec.n_out <= 0) {
      out.push_back({name, "n_out must be positive"});
    }
    if (spec.dropout < 0.0 || spec.dropout >= 1.0) {
      out.push_back({name, "dropout must be in [0, 1)"});
    }
    if (spec.label_smoothing < 0.0 || spec.label_smoothing >= 1.0) {
      out.push_back({name, "label_smoothing must be in [0, 1)"});
    }
    if (spec.cls == LayerClass::Rec && spec.direction != 1 && spec.direction != -1) {
      out.push_back({name, "direction must be +1 or -1"});
    }
    if (spec.cls == LayerClass::Combine && spec.kind != "add" && spec.kind != "mul") {
      out.push_back({name, "unknown combine kind '" + spec.kind + "'"});
    }
    if (spec.cls == LayerClass::Activation && !known_activation(spec.activation)) {
      out.push_back({name, "unknown activation '" + spec.activation + "'"});
    }
    if (spec.cls == LayerClass::Linear && !spec.activation.empty() &&
        !known_activation(spec.activation)) {
      out.push_back({name, "unknown activation '" + spec.activation + "'"});
    }
    if (!spec.loss.empty() && spec.loss != "ce" && spec.loss != "bleu") {
      out.push_back({name, "unknown loss '" + spec.loss + "'"});
    }
    if (spec.loss == "ce" && spec.cls != LayerClass::Softmax) {
      out.push_back({name, "loss 'ce' requires a softmax layer"});
    }
    if (spec.loss == "bleu" && spec.cls != LayerClass::Decide) {
      out.push_back({name, "loss 'bleu' requires a decide layer"});
    }
    if (spec.cls == LayerClass::Choice && !is_subnet) {
      out.push_back({name, "choice layer outside the recurrent subnetwork"});
    }
    if (spec.cls == LayerClass::Rec && is_subnet) {
      out.push_back({name, "sequence rec layers are not supported inside the subnetwork"});
    }
    if (spec.cls == LayerClass::Subnetwork) {
      if (spec.from_given && !spec.from.empty()) {
        out.push_back({name, "the recurrent subnetwork must have an empty 'from'"});
      }
    }
    if (!is_subnet && spec.from_given && spec.from.empty() &&
        spec.cls != LayerClass::Subnetwork) {
      out.push_back({name, "empty 'from' is only legal on the recurrent subnetwork"});
    }
  }

  std::string cyclic = find_plain_cycle(plain_deps);
  if (!cyclic.empty()) {
    out.push_back({cyclic, "plain-reference cycle through layer '" + cyclic +
                               "' (recurrence requires a prev: reference)"});
  }
}

}  // namespace

std::vector<Diagnostic> validate_config(const NetworkConfig& cfg) {
  std::vector<Diagnostic> out;
  if (cfg.layers.empty()) {
    out.push_back({"", "no layers"});
    return out;
  }
  int subnet_count = 0;
  for (const auto& [name, spec] : cfg.layers) {
    if (spec.is_subnetwork()) ++subnet_count;
  }
  if (subnet_count > 1) {
    out.push_back({"", "at most one recurrent subnetwork is supported, found " +
                           std::to_string(subnet_count)});
  }
  validate_scope(cfg, cfg.layers, false, out);
  if (!cfg.subnet_name.empty()) {
    const LayerSpec& sub = cfg.layers.at(cfg.subnet_name);
    validate_scope(cfg, sub.subnet, true, out);
    int choice_count = 0;
    for (const auto& [name, spec] : sub.subnet) {
      if (spec.cls == LayerClass::Choice) ++choice_count;
    }
    if (choice_count != 1) {
      out.push_back({cfg.subnet_name, choice_count == 0
                                          ? "no choice layer in the subnetwork"
                                          : "more than one choice layer in the subnetwork"});
    }
    if (!sub.subnet.count("output")) {
      out.push_back({cfg.subnet_name, "subnetwork has no layer named 'output'"});
    }
  }
  return out;
}

DepGraph resolve_references(const NetworkConfig& cfg) {
  auto diags = validate_config(cfg);
  if (!diags.empty()) {
    fail("resolve_references on invalid config (layer '" + diags[0].layer +
         "': " + diags[0].message + ")");
  }
  DepGraph g;
  auto qualify = [&](const std::string& inner) { return cfg.subnet_name + "/" + inner; };

  std::map<std::string, std::vector<std::string>> order_deps;  // plain(+base) for topo
  for (const auto& [name, spec] : cfg.layers) {
    g.nodes.push_back(name);
    auto& deps = order_deps[name];
    for (const auto& r : spec.from) {
      if (r.kind == RefKind::Plain && r.name != "data") {
        g.edges.push_back({r.name, name, EdgeLabel::Plain});
        deps.push_back(r.name);
      }
    }
  }
  if (!cfg.subnet_name.empty()) {
    const auto& sub = cfg.layers.at(cfg.subnet_name).subnet;
    for (const auto& [name, spec] : sub) {
      g.nodes.push_back(qualify(name));
      auto& deps = order_deps[qualify(name)];
      auto add_ref = [&](const LayerRef& r) {
        switch (r.kind) {
          case RefKind::Plain:
            g.edges.push_back({qualify(r.name), qualify(name), EdgeLabel::Plain});
            deps.push_back(qualify(r.name));
            break;
          case RefKind::Prev:
            g.edges.push_back({qualify(r.name), qualify(name), EdgeLabel::Prev});
            break;
          case RefKind::Base:
            g.edges.push_back({r.name, qualify(name), EdgeLabel::Base});
            deps.push_back(r.name);
            break;
        }
      };
      for (const auto& r : spec.from) add_ref(r);
      if (spec.cls == LayerClass::GenericAttention) {
        add_ref(parse_ref(spec.weights));
        add_ref(parse_ref(spec.base));
      }
      // The container orders after every inner layer.
      order_deps[cfg.subnet_name].push_back(qualify(name));
    }
  }

  std::map<std::string, int> in_degree;
  std::map<std::string, std::vector<std::string>> consumers;
  for (const auto& [node, deps] : order_deps) in_degree[node] = 0;
  for (const auto& [node, deps] : order_deps) {
    for (const auto& d : deps) {
      if (!in_degree.count(d)) continue;
      in_degree[node]++;
      consumers[d].push_back(node);
    }
  }
  std::set<std::string> ready;
  for (const auto& [node, deg] : in_degree) {
    if (deg == 0) ready.insert(node);
  }
  while (!ready.empty()) {
    std::string n = *ready.begin();
    ready.erase(ready.begin());
    g.topo_order.push_back(n);
    for (const auto& c : consumers[n]) {
      if (--in_degree[c] == 0) ready.insert(c);
    }
  }
  if (g.topo_order.size() != in_degree.size()) {
    fail("resolve_references: unexpected cycle after validation");
  }
  return g;
}

namespace {

json layer_to_json(const LayerSpec& spec) {
  json o = json::object();
  o["class"] = spec.is_subnetwork() ? "rec" : layer_class_name(spec.cls);
  if (spec.from_given) {
    json f = json::array();
    for (const auto& r : spec.from) f.push_back(ref_to_string(r));
    o["from"] = f;
  }
  if (spec.n_out) o["n_out"] = *spec.n_out;
  if (spec.direction != 1) o["direction"] = spec.direction;
  if (spec.is_subnetwork()) {
    json u = json::object();
    for (const auto& [name, inner] : spec.subnet) u[name] = layer_to_json(inner);
    o["unit"] = u;
  } else if (!spec.unit.empty()) {
    o["unit"] = spec.unit;
  }
  if (!spec.kind.empty()) o["kind"] = spec.kind;
  if (!spec.activation.empty()) o["activation"] = spec.activation;
  if (spec.dropout != 0.0) o["dropout"] = spec.dropout;
  if (!spec.loss.empty()) o["loss"] = spec.loss;
  if (spec.label_smoothing != 0.0) o["loss_opts"] = {{"label_smoothing", spec.label_smoothing}};
  if (spec.initial_output) o["initial_output"] = *spec.initial_output;
  if (!spec.weights.empty()) o["weights"] = spec.weights;
  if (!spec.base.empty()) o["base"] = spec.base;
  return o;
}

}  // namespace

std::string serialize_network_config(const NetworkConfig& cfg) {
  json net = json::object();
  for (const auto& [name, spec] : cfg.layers) net[name] = layer_to_json(spec);
  json doc = {{"network", net}};
  return doc.dump(2) + "\n";
}

}  // namespace seqloom
