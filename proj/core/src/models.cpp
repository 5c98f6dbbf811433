// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#include "seqloom/models.hpp"

namespace seqloom {

namespace {

LayerSpec linear(std::string name, std::vector<LayerRef> from, std::int64_t n_out) {
  LayerSpec s;
  s.name = std::move(name);
  s.cls = LayerClass::Linear;
  s.from = std::move(from);
  s.from_given = true;
  s.n_out = n_out;
  return s;
}

LayerRef plain(std::string n) { return {RefKind::Plain, std::move(n)}; }
LayerRef prev(std::string n) { return {RefKind::Prev, std::move(n)}; }
LayerRef base(std::string n) { return {RefKind::Base, std::move(n)}; }

}  // namespace

NetworkConfig make_attention_model(const AttentionModelOptions& o) {
  if (o.encoder_layers < 1) throw ConfigError("attention model needs >= 1 encoder layer");
  NetworkConfig cfg;

  LayerSpec src;
  src.name = "src";
  src.cls = LayerClass::Linear;
  src.n_out = o.embed_dim;
  src.from = {plain("data")};  // embedding of the input tokens
  cfg.layers.emplace("src", src);

  for (int i = 0; i < o.encoder_layers; ++i) {
    std::vector<LayerRef> from =
        i == 0 ? std::vector<LayerRef>{plain("src")}
               : std::vector<LayerRef>{plain("enc" + std::to_string(i - 1) + "_fw"),
                                       plain("enc" + std::to_string(i - 1) + "_bw")};
    for (int dir : {1, -1}) {
      LayerSpec rec;
      rec.name = "enc" + std::to_string(i) + (dir == 1 ? "_fw" : "_bw");
      rec.cls = LayerClass::Rec;
      rec.unit = "lstm";
      rec.n_out = o.hidden_dim;
      rec.direction = dir;
      rec.from = from;
      rec.from_given = true;
      cfg.layers.emplace(rec.name, rec);
    }
  }
  std::string top = "enc" + std::to_string(o.encoder_layers - 1);

  LayerSpec encoder;
  encoder.name = "encoder";
  encoder.cls = LayerClass::Copy;
  encoder.from = {plain(top + "_fw"), plain(top + "_bw")};
  encoder.from_given = true;
  cfg.layers.emplace("encoder", encoder);

  cfg.layers.emplace("enc_ctx", linear("enc_ctx", {plain("encoder")}, o.key_dim));

  if (o.inverse_fertility) {
    cfg.layers.emplace("fert_lin", linear("fert_lin", {plain("encoder")}, 1));
    LayerSpec sig;
    sig.name = "fert_sig";
    sig.cls = LayerClass::Activation;
    sig.activation = "sigmoid";
    sig.from = {plain("fert_lin")};
    sig.from_given = true;
    cfg.layers.emplace("fert_sig", sig);
    // 2 * sigmoid, an inverse-fertility gate in (0, 2)
    LayerSpec gate;
    gate.name = "inv_fertility";
    gate.cls = LayerClass::Combine;
    gate.kind = "add";
    gate.from = {plain("fert_sig"), plain("fert_sig")};
    gate.from_given = true;
    cfg.layers.emplace("inv_fertility", gate);
  }

  LayerSpec subnet;
  subnet.name = "output";
  subnet.cls = LayerClass::Subnetwork;
  subnet.from_given = true;  // explicit empty from

  {
    LayerSpec choice;
    choice.name = "output";
    choice.cls = LayerClass::Choice;
    choice.from = {plain("output_prob")};
    choice.from_given = true;
    subnet.subnet.emplace("output", choice);

    LayerSpec trg = linear("trg", {plain("output")}, o.embed_dim);
    trg.initial_output = 0;
    subnet.subnet.emplace("trg", trg);

    if (o.inverse_fertility) {
      LayerSpec scaled;
      scaled.name = "fb_scaled";
      scaled.cls = LayerClass::Combine;
      scaled.kind = "mul";
      scaled.from = {prev("accum_a"), base("inv_fertility")};
      scaled.from_given = true;
      subnet.subnet.emplace("fb_scaled", scaled);
      subnet.subnet.emplace("weight_feedback",
                            linear("weight_feedback", {plain("fb_scaled")}, o.key_dim));
    } else {
      subnet.subnet.emplace("weight_feedback",
                            linear("weight_feedback", {prev("accum_a")}, o.key_dim));
    }

    subnet.subnet.emplace("s_tr", linear("s_tr", {plain("s")}, o.key_dim));

    LayerSpec e_in;
    e_in.name = "e_in";
    e_in.cls = LayerClass::Combine;
    e_in.kind = "add";
    e_in.from = {base("enc_ctx"), plain("weight_feedback"), plain("s_tr")};
    e_in.from_given = true;
    subnet.subnet.emplace("e_in", e_in);

    LayerSpec e_tanh;
    e_tanh.name = "e_tanh";
    e_tanh.cls = LayerClass::Activation;
    e_tanh.activation = "tanh";
    e_tanh.from = {plain("e_in")};
    e_tanh.from_given = true;
    subnet.subnet.emplace("e_tanh", e_tanh);

    subnet.subnet.emplace("e", linear("e", {plain("e_tanh")}, 1));

    LayerSpec a;
    a.name = "a";
    a.cls = LayerClass::SoftmaxOverSpatial;
    a.from = {plain("e")};
    a.from_given = true;
    subnet.subnet.emplace("a", a);

    LayerSpec accum;
    accum.name = "accum_a";
    accum.cls = LayerClass::Combine;
    accum.kind = "add";
    accum.from = {prev("accum_a"), plain("a")};
    accum.from_given = true;
    subnet.subnet.emplace("accum_a", accum);

    LayerSpec att;
    att.name = "att";
    att.cls = LayerClass::GenericAttention;
    att.weights = "a";
    att.base = "base:encoder";
    subnet.subnet.emplace("att", att);

    LayerSpec s;
    s.name = "s";
    s.cls = LayerClass::RnnCell;
    s.unit = "lstm";
    s.n_out = o.hidden_dim;
    s.from = {prev("trg"), prev("att")};
    s.from_given = true;
    subnet.subnet.emplace("s", s);

    LayerSpec readout = linear("readout", {plain("s"), prev("trg"), plain("att")}, o.readout_dim);
    readout.activation = "relu";
    subnet.subnet.emplace("readout", readout);

    LayerSpec prob;
    prob.name = "output_prob";
    prob.cls = LayerClass::Softmax;
    prob.from = {plain("readout")};
    prob.from_given = true;
    prob.dropout = o.dropout;
    prob.loss = "ce";
    prob.label_smoothing = o.label_smoothing;
    subnet.subnet.emplace("output_prob", prob);
  }
  cfg.layers.emplace("output", subnet);
  cfg.subnet_name = "output";

  LayerSpec decision;
  decision.name = "decision";
  decision.cls = LayerClass::Decide;
  decision.from = {plain("output")};
  decision.from_given = true;
  decision.loss = "bleu";
  cfg.layers.emplace("decision", decision);

  auto diags = validate_config(cfg);
  if (!diags.empty()) {
    throw ConfigError("make_attention_model produced an invalid config: " + diags[0].layer +
                      ": " + diags[0].message);
  }
  return cfg;
}

}  // namespace seqloom
