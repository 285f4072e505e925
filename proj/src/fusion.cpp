// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/fusion.hpp"

#include <cmath>

#include "adafuse/container.hpp"
#include "adafuse/error.hpp"
#include "adafuse/rng.hpp"

namespace adafuse {

using ad::Tensor;

Json FusionConfig::to_json() const {
  return Json{{"regularizer", regularizer == FusionRegularizer::plain ? "plain" : "identity_deviation"},
              {"drop_last_layer", drop_last_layer},
              {"qk_init_std", qk_init_std},
              {"value_noise_norm", value_noise_norm}};
}

FusionConfig FusionConfig::from_json(const Json& j, const std::string& path) {
  JsonReader r(j, path);
  FusionConfig c;
  const auto reg = r.get<std::string>("regularizer", "identity_deviation");
  if (reg == "plain") {
    c.regularizer = FusionRegularizer::plain;
  } else if (reg != "identity_deviation") {
    throw ConfigError(r.field("regularizer") + ": expected identity_deviation or plain, got '" + reg + "'");
  }
  c.drop_last_layer = r.get("drop_last_layer", c.drop_last_layer);
  c.qk_init_std = r.get("qk_init_std", c.qk_init_std);
  c.value_noise_norm = r.get("value_noise_norm", c.value_noise_norm);
  r.finish();
  if (c.qk_init_std < 0.0) throw ConfigError(r.field("qk_init_std") + ": must be >= 0");
  if (c.value_noise_norm < 0.0) throw ConfigError(r.field("value_noise_norm") + ": must be >= 0");
  return c;
}

std::size_t FusionParams::active_layers() const {
  return config.drop_last_layer && num_layers > 1 ? num_layers - 1 : num_layers;
}

ad::ParamSet FusionParams::params() const {
  ad::ParamSet ps;
  for (std::size_t l = 0; l < num_layers; ++l) {
    ps.add(query[l]);
    ps.add(key[l]);
    ps.add(value[l]);
  }
  return ps;
}

FusionParams FusionParams::clone() const {
  FusionParams p = *this;
  for (std::size_t l = 0; l < num_layers; ++l) {
    p.query[l] = query[l].clone();
    p.key[l] = key[l].clone();
    p.value[l] = value[l].clone();
  }
  return p;
}

namespace {

void check_members(const BackboneConfig& backbone, std::span<const AdapterParams> members) {
  if (members.empty()) throw UsageError("fusion needs at least one member adapter");
  const std::string fp = backbone.fingerprint();
  const AdapterConfig& first = members.front().config;
  for (const auto& m : members) {
    if (m.backbone_fingerprint != fp) {
      throw CompatibilityError("member adapter '" + m.task + "' was trained for backbone " +
                               m.backbone_fingerprint + ", fusion backbone is " + fp);
    }
    if (m.config.placements() != first.placements()) {
      throw CompatibilityError("member adapter '" + m.task + "' has a different placement set");
    }
    if (m.config.ln_before != first.ln_before || m.config.ln_after != first.ln_after) {
      throw CompatibilityError("member adapter '" + m.task + "' has a different pretrained-norm wiring");
    }
  }
}

Tensor random_matrix(const std::string& name, std::size_t d, double sd, Rng& rng) {
  std::vector<double> v(d * d);
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor::parameter(name, {d, d}, std::move(v));
}

Tensor near_identity(const std::string& name, std::size_t d, double noise_norm, Rng& rng) {
  std::vector<double> e(d * d, 0.0);
  double sq = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      if (i == j) continue;
      e[i * d + j] = rng.normal(0.0, 1.0);
      sq += e[i * d + j] * e[i * d + j];
    }
  }
  const double k = sq > 0.0 ? noise_norm / std::sqrt(sq) : 0.0;
  std::vector<double> v(d * d);
  for (std::size_t i = 0; i < d * d; ++i) v[i] = e[i] * k;
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
  return Tensor::parameter(name, {d, d}, std::move(v));
}

Tensor identity(std::size_t d) {
  Tensor t = Tensor::zeros({d, d});
  for (std::size_t i = 0; i < d; ++i) t.mutable_data()[i * d + i] = 1.0;
  return t;
}

}  // namespace

FusionParams fusion_init(const BackboneConfig& backbone, std::span<const AdapterParams> members,
                         std::uint64_t seed, const std::string& target, const FusionConfig& config) {
  backbone.validate();
  check_members(backbone, members);
  const std::size_t d = backbone.hidden_dim;
  Rng rng(derive_seed(seed, "fusion"));
  FusionParams p;
  p.target = target;
  for (const auto& m : members) p.members.push_back(m.task);
  p.config = config;
  p.backbone_fingerprint = backbone.fingerprint();
  p.hidden_dim = d;
  p.num_layers = backbone.num_layers;
  for (std::size_t l = 0; l < p.num_layers; ++l) {
    const std::string pre = "fusion.layer." + std::to_string(l) + ".";
    p.query.push_back(random_matrix(pre + "query", d, config.qk_init_std, rng));
    p.key.push_back(random_matrix(pre + "key", d, config.qk_init_std, rng));
    p.value.push_back(near_identity(pre + "value", d, config.value_noise_norm, rng));
  }
  return p;
}

FusionOutput fusion_forward(const FusionParams& psi, const Tensor& h, std::span<const Tensor> z,
                            std::size_t layer) {
  if (z.empty()) throw UsageError("fusion_forward needs at least one member output");
  if (layer >= psi.num_layers) {
    throw UsageError("fusion layer " + std::to_string(layer) + " out of range");
  }
  if (z.size() != psi.num_members()) {
    throw UsageError("fusion expects " + std::to_string(psi.num_members()) + " member outputs, got " +
                     std::to_string(z.size()));
  }
  for (const auto& zn : z) {
    if (zn.shape() != h.shape()) {
      throw DimensionError("member output " + ad::shape_str(zn.shape()) + " does not match query " +
                           ad::shape_str(h.shape()));
    }
  }
  Tensor q = ad::matmul(h, psi.query[layer]);
  std::vector<Tensor> logits;
  for (const auto& zn : z) logits.push_back(ad::row_dot(q, ad::matmul(zn, psi.key[layer])));
  Tensor s = ad::softmax(ad::concat_last(logits), -1);
  Tensor o;
  for (std::size_t n = 0; n < z.size(); ++n) {
    Tensor term = ad::mul_broadcast_last(ad::matmul(z[n], psi.value[layer]), ad::select_last(s, n));
    o = n == 0 ? term : ad::add(o, term);
  }
  return {o, s};
}

Tensor fusion_regularizer(const FusionParams& psi, double lambda) {
  if (lambda < 0.0) throw ConfigError("fusion lambda must be >= 0");
  const Tensor eye = identity(psi.hidden_dim);
  Tensor total;
  for (std::size_t l = 0; l < psi.active_layers(); ++l) {
    Tensor dev = psi.config.regularizer == FusionRegularizer::plain ? psi.value[l]
                                                                    : ad::sub(psi.value[l], eye);
    Tensor sq = ad::sum(ad::mul(dev, dev));
    total = l == 0 ? sq : ad::add(total, sq);
  }
  return ad::scale(total, lambda);
}

// ---- tracing ----

FusionTraceAccumulator::FusionTraceAccumulator(std::size_t num_layers, std::size_t num_members)
    : sums_(num_layers, std::vector<double>(num_members, 0.0)), positions_(num_layers, 0) {}

void FusionTraceAccumulator::add(std::size_t layer, const Tensor& weights, const TokenBatch& batch) {
  const std::size_t n = sums_.at(layer).size();
  if (weights.last_dim() != n || weights.numel() != batch.batch * batch.seq * n) {
    throw DimensionError("fusion weights " + ad::shape_str(weights.shape()) +
                         " do not match the batch and member count");
  }
  const auto w = weights.data();
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < batch.lengths[b]; ++t) {
      const double* row = w.data() + (b * batch.seq + t) * n;
      double total = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        sums_[layer][k] += row[k];
        total += row[k];
      }
      max_row_error_ = std::max(max_row_error_, std::abs(total - 1.0));
      ++positions_[layer];
    }
  }
}

std::vector<double> FusionTraceAccumulator::means(std::size_t layer) const {
  std::vector<double> out(sums_.at(layer).size(), 0.0);
  if (positions_[layer] == 0) return {};
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = sums_[layer][k] / static_cast<double>(positions_[layer]);
  }
  return out;
}

Json FusionActivationTrace::to_json() const {
  return Json{{"target", target},
              {"members", members},
              {"layers", layers},
              {"instance_count", instance_count},
              {"max_row_sum_error", max_row_sum_error}};
}

FusionActivationTrace FusionActivationTrace::from_json(const Json& j) {
  FusionActivationTrace t;
  try {
    t.target = j.at("target").get<std::string>();
    t.members = j.at("members").get<std::vector<std::string>>();
    t.layers = j.at("layers").get<std::vector<std::vector<double>>>();
    t.instance_count = j.at("instance_count").get<std::size_t>();
    t.max_row_sum_error = j.value("max_row_sum_error", 0.0);
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed activation trace: ") + e.what());
  }
  for (const auto& row : t.layers) {
    if (!row.empty() && row.size() != t.members.size()) {
      throw FormatError("activation trace row does not match the member list");
    }
  }
  return t;
}

// ---- hooks ----

namespace {

// The tap whose weights go into traces: top when present, otherwise bottom.
Tap traced_tap(const AdapterConfig& c) { return c.place_top ? Tap::top : Tap::bottom; }

}  // namespace

FusionHook::FusionHook(const FusionParams& psi, std::span<const AdapterParams> members,
                       std::size_t layer, Tap tap, FusionTraceAccumulator* trace)
    : psi_(psi), layer_(layer), trace_(trace) {
  if (members.size() != psi.num_members()) {
    throw UsageError("fusion has " + std::to_string(psi.num_members()) + " members, got " +
                     std::to_string(members.size()) + " adapters");
  }
  for (std::size_t n = 0; n < members.size(); ++n) {
    if (members[n].task != psi.members[n]) {
      throw UsageError("fusion member " + std::to_string(n) + " is '" + psi.members[n] +
                       "', got adapter '" + members[n].task + "'");
    }
    configs_.push_back(members[n].config);
    blocks_.push_back(members[n].block(layer, tap));
  }
  wiring_ = members.front().config;
  if (tap != traced_tap(wiring_)) trace_ = nullptr;
}

Tensor FusionHook::apply(const TapContext& ctx) const {
  Tensor h = adapter_input(wiring_, ctx);
  std::vector<Tensor> z;
  z.reserve(blocks_.size());
  for (std::size_t n = 0; n < blocks_.size(); ++n) {
    z.push_back(adapter_block_forward(blocks_[n], configs_[n], h, ctx.ln_eps));
  }
  FusionOutput fo = fusion_forward(psi_, h, z, layer_);
  if (trace_) trace_->add(layer_, fo.weights, ctx.batch);
  return adapter_output(wiring_, ctx, fo.output);
}

void install_fusion(HookSet& hooks, const FusionParams& psi, std::span<const AdapterParams> members,
                    FusionTraceAccumulator* trace) {
  if (members.empty()) throw UsageError("fusion needs at least one member adapter");
  if (hooks.num_layers() != psi.num_layers) {
    throw CompatibilityError("fusion has " + std::to_string(psi.num_layers) +
                             " layers, hook set has " + std::to_string(hooks.num_layers()));
  }
  for (const auto& m : members) {
    if (m.backbone_fingerprint != psi.backbone_fingerprint) {
      throw CompatibilityError("member adapter '" + m.task + "' does not match the fusion backbone");
    }
  }
  for (std::size_t l = 0; l < psi.active_layers(); ++l) {
    for (Tap tap : members.front().config.placements()) {
      hooks.set(l, tap, std::make_shared<FusionHook>(psi, members, l, tap, trace));
    }
  }
}

FusionActivationTrace trace_activations(const FusionParams& psi, const BackboneParams& theta,
                                        std::span<const AdapterParams> members,
                                        const std::vector<std::vector<int>>& sequences,
                                        std::size_t batch_size) {
  if (sequences.empty()) throw DataError("cannot trace activations on an empty dataset");
  if (batch_size == 0) throw UsageError("batch_size must be positive");
  FusionTraceAccumulator acc(psi.num_layers, psi.num_members());
  HookSet hooks(psi.num_layers);
  install_fusion(hooks, psi, members, &acc);
  ad::NoGradGuard no_grad;
  for (std::size_t i = 0; i < sequences.size(); i += batch_size) {
    std::vector<const std::vector<int>*> chunk;
    for (std::size_t k = i; k < std::min(sequences.size(), i + batch_size); ++k) {
      chunk.push_back(&sequences[k]);
    }
    encoder_forward(theta, TokenBatch::pack(chunk), &hooks);
    acc.count_instances(chunk.size());
  }
  FusionActivationTrace t;
  t.target = psi.target;
  t.members = psi.members;
  for (std::size_t l = 0; l < psi.num_layers; ++l) t.layers.push_back(acc.means(l));
  t.instance_count = acc.instances();
  t.max_row_sum_error = acc.max_row_sum_error();
  return t;
}

// ---- checkpoints ----

void serialize_fusion(const FusionParams& psi, const Json& metadata,
                      const std::filesystem::path& path) {
  Container c;
  c.config = Json{{"fusion", psi.config.to_json()},
                  {"target", psi.target},
                  {"hidden_dim", psi.hidden_dim},
                  {"num_layers", psi.num_layers}};
  c.fingerprint = psi.backbone_fingerprint;
  c.metadata = metadata;
  c.extra["members"] = psi.members;
  c.tensors = copy_tensors(psi.params());
  write_container(path, c);
}

FusionParams deserialize_fusion(const std::filesystem::path& path, const BackboneConfig& backbone,
                                Json* metadata) {
  Container c = read_container(path);
  if (c.fingerprint != backbone.fingerprint()) {
    throw CompatibilityError(path.string() + ": fusion was trained for backbone " + c.fingerprint +
                             ", current backbone is " + backbone.fingerprint());
  }
  FusionParams p;
  try {
    p.config = FusionConfig::from_json(c.config.at("fusion"), "$.config.fusion");
    p.target = c.config.at("target").get<std::string>();
    p.members = c.extra.at("members").get<std::vector<std::string>>();
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const Json::exception& e) {
    throw FormatError(path.string() + ": malformed fusion header: " + e.what());
  }
  if (p.members.empty()) throw FormatError(path.string() + ": fusion checkpoint lists no members");
  const std::size_t d = backbone.hidden_dim;
  p.backbone_fingerprint = c.fingerprint;
  p.hidden_dim = d;
  p.num_layers = backbone.num_layers;
  if (c.tensors.size() != 3 * p.num_layers) {
    throw FormatError(path.string() + ": expected " + std::to_string(3 * p.num_layers) +
                      " fusion tensors, found " + std::to_string(c.tensors.size()));
  }
  const char* kinds[3] = {"query", "key", "value"};
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    const std::string want = "fusion.layer." + std::to_string(i / 3) + "." + kinds[i % 3];
    const Tensor& t = c.tensors[i];
    if (t.name() != want || t.shape() != ad::Shape{d, d}) {
      throw FormatError(path.string() + ": tensor '" + t.name() + "' " + ad::shape_str(t.shape()) +
                        " does not match expected '" + want + "'");
    }
  }
  for (std::size_t l = 0; l < p.num_layers; ++l) {
    for (int k = 0; k < 3; ++k) {
      Tensor t = c.tensors[3 * l + k].detach();
      t.set_trainable(true);
      (k == 0 ? p.query : k == 1 ? p.key : p.value).push_back(t);
    }
  }
  if (metadata) *metadata = c.metadata;
  return p;
}

}  // namespace adafuse
