// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/adapters.hpp"

#include <algorithm>

#include "adafuse/container.hpp"
#include "adafuse/error.hpp"
#include "adafuse/rng.hpp"

namespace adafuse {

using ad::Tensor;

std::string to_string(NewLnPosition p) {
  switch (p) {
    case NewLnPosition::none: return "none";
    case NewLnPosition::before_adapter: return "before_adapter";
    case NewLnPosition::after_adapter: return "after_adapter";
    case NewLnPosition::inside: return "inside";
  }
  return "?";
}

std::string to_string(AdapterPreset p) {
  switch (p) {
    case AdapterPreset::pfeiffer: return "pfeiffer";
    case AdapterPreset::houlsby: return "houlsby";
    case AdapterPreset::custom: return "custom";
  }
  return "?";
}

std::string to_string(InitStyle s) {
  return s == InitStyle::identity_zero ? "identity_zero" : "full_random";
}

std::string to_string(Tap t) { return t == Tap::top ? "top" : "bottom"; }

NewLnPosition parse_new_ln(const std::string& text) {
  for (auto p : {NewLnPosition::none, NewLnPosition::before_adapter, NewLnPosition::after_adapter,
                 NewLnPosition::inside}) {
    if (to_string(p) == text) return p;
  }
  throw ConfigError("unknown new_ln position '" + text + "'");
}

AdapterPreset parse_preset(const std::string& text) {
  for (auto p : {AdapterPreset::pfeiffer, AdapterPreset::houlsby, AdapterPreset::custom}) {
    if (to_string(p) == text) return p;
  }
  throw ConfigError("unknown adapter preset '" + text + "'");
}

InitStyle parse_init_style(const std::string& text) {
  if (text == "identity_zero") return InitStyle::identity_zero;
  if (text == "full_random") return InitStyle::full_random;
  throw ConfigError("unknown init_style '" + text + "'");
}

Tap parse_tap(const std::string& text) {
  if (text == "top") return Tap::top;
  if (text == "bottom") return Tap::bottom;
  throw ConfigError("unknown placement '" + text + "'");
}

AdapterConfig AdapterConfig::pfeiffer(std::size_t reduction_factor) {
  AdapterConfig c;
  c.reduction_factor = reduction_factor;
  return c;
}

AdapterConfig AdapterConfig::houlsby(std::size_t reduction_factor) {
  AdapterConfig c;
  c.reduction_factor = reduction_factor;
  c.place_bottom = true;
  c.ln_before = false;
  c.preset = AdapterPreset::houlsby;
  return c;
}

AdapterPreset AdapterConfig::implied_preset() const {
  if (place_top && place_bottom) return AdapterPreset::houlsby;
  if (place_top && !place_bottom && ln_before && ln_after && new_ln == NewLnPosition::none) {
    return AdapterPreset::pfeiffer;
  }
  return AdapterPreset::custom;
}

AdapterConfig& AdapterConfig::retag() {
  preset = implied_preset();
  return *this;
}

std::vector<Tap> AdapterConfig::placements() const {
  std::vector<Tap> out;
  if (place_bottom) out.push_back(Tap::bottom);
  if (place_top) out.push_back(Tap::top);
  return out;
}

std::size_t AdapterConfig::bottleneck_dim(std::size_t hidden_dim) const {
  validate(hidden_dim);
  return hidden_dim / reduction_factor;
}

void AdapterConfig::validate(std::size_t hidden_dim) const {
  if (!place_top && !place_bottom) throw ConfigError("adapter placement set is empty");
  if (reduction_factor == 0) throw ConfigError("reduction_factor must be positive");
  if (hidden_dim > 0 && (hidden_dim % reduction_factor != 0 || hidden_dim < reduction_factor)) {
    throw ConfigError("hidden_dim " + std::to_string(hidden_dim) +
                      " is not divisible by reduction_factor " + std::to_string(reduction_factor));
  }
  if (preset != implied_preset()) {
    throw ConfigError("adapter preset '" + to_string(preset) + "' does not match its fields (implies '" +
                      to_string(implied_preset()) + "')");
  }
}

Json AdapterConfig::to_json() const {
  Json placement = Json::array();
  for (Tap t : placements()) placement.push_back(to_string(t));
  Json ln = Json::array();
  if (ln_before) ln.push_back("before");
  if (ln_after) ln.push_back("after");
  if (ln.empty()) ln.push_back("none");
  Json j{{"placement", placement},
         {"reduction_factor", reduction_factor},
         {"nonlinearity", ad::to_string(nonlinearity.kind)},
         {"residual", residual},
         {"pretrained_ln", ln},
         {"new_ln", to_string(new_ln)},
         {"preset", to_string(preset)},
         {"init_style", to_string(init_style)}};
  if (nonlinearity.kind == ad::Activation::leaky_relu) j["leaky_slope"] = nonlinearity.leaky_slope;
  return j;
}

AdapterConfig AdapterConfig::from_json(const Json& j, const std::string& path) {
  JsonReader r(j, path);
  AdapterConfig c;
  // A preset fills in the structural defaults; explicit fields override it.
  if (r.has("preset")) {
    const AdapterPreset p = parse_preset(r.require<std::string>("preset"));
    if (p == AdapterPreset::houlsby) c = houlsby();
    c.preset = p;
  }
  if (r.has("placement")) {
    c.place_top = c.place_bottom = false;
    for (const auto& s : r.require<std::vector<std::string>>("placement")) {
      try {
        (parse_tap(s) == Tap::top ? c.place_top : c.place_bottom) = true;
      } catch (const ConfigError& e) {
        throw ConfigError(r.field("placement") + ": " + e.what());
      }
    }
  }
  c.reduction_factor = r.get("reduction_factor", c.reduction_factor);
  if (r.has("nonlinearity")) {
    try {
      c.nonlinearity.kind = ad::parse_activation(r.require<std::string>("nonlinearity"));
    } catch (const ConfigError& e) {
      throw ConfigError(r.field("nonlinearity") + ": " + e.what());
    }
  }
  c.nonlinearity.leaky_slope = r.get("leaky_slope", c.nonlinearity.leaky_slope);
  c.residual = r.get("residual", c.residual);
  if (r.has("pretrained_ln")) {
    c.ln_before = c.ln_after = false;
    for (const auto& s : r.require<std::vector<std::string>>("pretrained_ln")) {
      if (s == "before") {
        c.ln_before = true;
      } else if (s == "after") {
        c.ln_after = true;
      } else if (s != "none") {
        throw ConfigError(r.field("pretrained_ln") + ": unknown position '" + s + "'");
      }
    }
  }
  if (r.has("new_ln")) {
    try {
      c.new_ln = parse_new_ln(r.require<std::string>("new_ln"));
    } catch (const ConfigError& e) {
      throw ConfigError(r.field("new_ln") + ": " + e.what());
    }
  }
  if (r.has("init_style")) {
    try {
      c.init_style = parse_init_style(r.require<std::string>("init_style"));
    } catch (const ConfigError& e) {
      throw ConfigError(r.field("init_style") + ": " + e.what());
    }
  }
  r.finish();
  if (!r.has("preset")) c.retag();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

// ---- parameters ----

const AdapterBlock& AdapterParams::block(std::size_t layer, Tap tap) const {
  if (layer >= blocks.size()) {
    throw UsageError("adapter layer " + std::to_string(layer) + " out of range (model has " +
                     std::to_string(blocks.size()) + " layers)");
  }
  const auto& b = blocks[layer][static_cast<std::size_t>(tap)];
  if (!b) {
    throw UsageError("adapter '" + task + "' has no " + to_string(tap) + " placement");
  }
  return *b;
}

ad::ParamSet AdapterParams::params() const {
  ad::ParamSet ps;
  for (const auto& layer : blocks) {
    for (Tap tap : {Tap::bottom, Tap::top}) {
      const auto& b = layer[static_cast<std::size_t>(tap)];
      if (!b) continue;
      ps.add(b->down_w);
      ps.add(b->down_b);
      ps.add(b->up_w);
      ps.add(b->up_b);
      if (b->ln_gain.defined()) {
        ps.add(b->ln_gain);
        ps.add(b->ln_bias);
      }
    }
  }
  return ps;
}

AdapterParams AdapterParams::clone() const {
  AdapterParams p = *this;
  for (auto& layer : p.blocks) {
    for (auto& b : layer) {
      if (!b) continue;
      b->down_w = b->down_w.clone();
      b->down_b = b->down_b.clone();
      b->up_w = b->up_w.clone();
      b->up_b = b->up_b.clone();
      if (b->ln_gain.defined()) {
        b->ln_gain = b->ln_gain.clone();
        b->ln_bias = b->ln_bias.clone();
      }
    }
  }
  return p;
}

namespace {

std::size_t new_ln_width(const AdapterConfig& c, std::size_t d) {
  switch (c.new_ln) {
    case NewLnPosition::none: return 0;
    case NewLnPosition::inside: return d / c.reduction_factor;
    default: return d;
  }
}

}  // namespace

AdapterParams make_adapter(const BackboneConfig& backbone, const AdapterConfig& config,
                           std::uint64_t seed, const std::string& task) {
  backbone.validate();
  const std::size_t d = backbone.hidden_dim;
  const std::size_t m = config.bottleneck_dim(d);
  Rng rng(derive_seed(seed, "adapter"));
  auto normal = [&](const std::string& name, ad::Shape shape, double sd) {
    std::vector<double> v(ad::shape_numel(shape));
    for (double& x : v) x = rng.normal(0.0, sd);
    return Tensor::parameter(name, std::move(shape), std::move(v));
  };
  auto constant = [](const std::string& name, ad::Shape shape, double value) {
    return Tensor::parameter(name, shape, std::vector<double>(ad::shape_numel(shape), value));
  };

  AdapterParams p;
  p.task = task;
  p.config = config;
  p.backbone_fingerprint = backbone.fingerprint();
  p.hidden_dim = d;
  p.num_layers = backbone.num_layers;
  p.blocks.resize(backbone.num_layers);
  for (std::size_t l = 0; l < backbone.num_layers; ++l) {
    for (Tap tap : config.placements()) {
      const std::string pre = "layer." + std::to_string(l) + "." + to_string(tap) + ".";
      AdapterBlock b;
      b.down_w = normal(pre + "down.weight", {d, m}, 0.01);
      b.down_b = constant(pre + "down.bias", {m}, 0.0);
      b.up_w = config.init_style == InitStyle::full_random ? normal(pre + "up.weight", {m, d}, 0.01)
                                                           : constant(pre + "up.weight", {m, d}, 0.0);
      b.up_b = constant(pre + "up.bias", {d}, 0.0);
      if (const std::size_t w = new_ln_width(config, d)) {
        b.ln_gain = constant(pre + "new_ln.gain", {w}, 1.0);
        b.ln_bias = constant(pre + "new_ln.bias", {w}, 0.0);
      }
      p.blocks[l][static_cast<std::size_t>(tap)] = std::move(b);
    }
  }
  return p;
}

Tensor adapter_block_forward(const AdapterBlock& b, const AdapterConfig& c, const Tensor& x,
                             double ln_eps) {
  Tensor u = x;
  if (c.new_ln == NewLnPosition::before_adapter) u = ad::layer_norm(u, b.ln_gain, b.ln_bias, ln_eps);
  Tensor a = ad::linear(u, b.down_w, b.down_b);
  if (c.new_ln == NewLnPosition::inside) a = ad::layer_norm(a, b.ln_gain, b.ln_bias, ln_eps);
  a = ad::nonlinearity(a, c.nonlinearity);
  Tensor y = ad::linear(a, b.up_w, b.up_b);
  if (c.new_ln == NewLnPosition::after_adapter) y = ad::layer_norm(y, b.ln_gain, b.ln_bias, ln_eps);
  return c.residual ? ad::add(y, x) : y;
}

Tensor adapter_forward(const AdapterParams& phi, const Tensor& x, std::size_t layer, Tap tap) {
  if (x.last_dim() != phi.hidden_dim) {
    throw DimensionError("adapter input has last dim " + std::to_string(x.last_dim()) +
                         ", adapter expects " + std::to_string(phi.hidden_dim));
  }
  return adapter_block_forward(phi.block(layer, tap), phi.config, x, 1e-5);
}

Tensor adapter_input(const AdapterConfig& c, const TapContext& ctx) {
  if (c.ln_before) return add_and_norm(ctx);
  return ctx.sublayer_out;
}

Tensor adapter_output(const AdapterConfig& c, const TapContext& ctx, const Tensor& y) {
  if (c.ln_after) {
    return ad::layer_norm(ad::add(y, ctx.residual), ctx.norm.gain, ctx.norm.bias, ctx.ln_eps);
  }
  // The "before" norm already folded the residual into the adapter input.
  return c.ln_before ? y : ad::add(y, ctx.residual);
}

std::size_t param_count(const AdapterConfig& c, const BackboneConfig& backbone) {
  const std::size_t d = backbone.hidden_dim;
  const std::size_t m = c.bottleneck_dim(d);
  const std::size_t per = d * m + m + m * d + d + 2 * new_ln_width(c, d);
  return per * backbone.num_layers * c.placements().size();
}

// ---- hooks ----

AdapterHook::AdapterHook(const AdapterParams& phi, std::size_t layer, Tap tap)
    : config_(phi.config), block_(phi.block(layer, tap)), hidden_dim_(phi.hidden_dim) {}

Tensor AdapterHook::apply(const TapContext& ctx) const {
  Tensor h = adapter_input(config_, ctx);
  Tensor y = adapter_block_forward(block_, config_, h, ctx.ln_eps);
  return adapter_output(config_, ctx, y);
}

void install_adapter(HookSet& hooks, const AdapterParams& phi,
                     const std::vector<std::size_t>& skip_layers) {
  if (hooks.num_layers() != phi.num_layers) {
    throw CompatibilityError("adapter has " + std::to_string(phi.num_layers) +
                             " layers, hook set has " + std::to_string(hooks.num_layers()));
  }
  for (std::size_t l = 0; l < phi.num_layers; ++l) {
    if (std::find(skip_layers.begin(), skip_layers.end(), l) != skip_layers.end()) continue;
    for (Tap tap : phi.config.placements()) {
      hooks.set(l, tap, std::make_shared<AdapterHook>(phi, l, tap));
    }
  }
}

// ---- checkpoints ----

void serialize_adapter(const AdapterParams& phi, const Json& metadata,
                       const std::filesystem::path& path) {
  Container c;
  c.config = Json{{"adapter", phi.config.to_json()},
                  {"task", phi.task},
                  {"hidden_dim", phi.hidden_dim},
                  {"num_layers", phi.num_layers}};
  c.fingerprint = phi.backbone_fingerprint;
  c.metadata = metadata;
  c.metadata["task"] = phi.task;
  c.tensors = copy_tensors(phi.params());
  write_container(path, c);
}

AdapterParams deserialize_adapter(const std::filesystem::path& path, const BackboneConfig& backbone,
                                  Json* metadata) {
  Container c = read_container(path);
  if (c.fingerprint != backbone.fingerprint()) {
    throw CompatibilityError(path.string() + ": adapter was trained for backbone " + c.fingerprint +
                             ", current backbone is " + backbone.fingerprint());
  }
  AdapterConfig config;
  std::string task;
  try {
    config = AdapterConfig::from_json(c.config.at("adapter"), "$.config.adapter");
    task = c.config.at("task").get<std::string>();
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const Json::exception& e) {
    throw FormatError(path.string() + ": malformed adapter config: " + e.what());
  }
  AdapterParams p = make_adapter(backbone, config, 0, task);
  const ad::ParamSet slots = p.params();
  if (slots.size() != c.tensors.size()) {
    throw FormatError(path.string() + ": expected " + std::to_string(slots.size()) +
                      " adapter tensors, found " + std::to_string(c.tensors.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const Tensor& src = c.tensors[i];
    Tensor dst = slots.tensors()[i];
    if (src.name() != dst.name() || src.shape() != dst.shape()) {
      throw FormatError(path.string() + ": tensor '" + src.name() + "' " +
                        ad::shape_str(src.shape()) + " does not match expected '" + dst.name() +
                        "' " + ad::shape_str(dst.shape()));
    }
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    Tensor dst = slots.tensors()[i];
    dst.assign(c.tensors[i]);
  }
  if (metadata) *metadata = c.metadata;
  return p;
}

}  // namespace adafuse
