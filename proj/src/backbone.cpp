// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "adafuse/autodiff/optim.hpp"
#include "adafuse/container.hpp"
#include "adafuse/error.hpp"

namespace adafuse {

using ad::Tensor;

void BackboneConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(kFirstRegularToken)) {
    throw ConfigError("vocab_size must exceed the reserved pad/mask/cls tokens");
  }
  if (max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
  if (hidden_dim < 1 || num_layers < 1 || ffn_dim < 1) {
    throw ConfigError("hidden_dim, num_layers and ffn_dim must be positive");
  }
  if (num_heads < 1 || hidden_dim % num_heads != 0) {
    throw ConfigError("hidden_dim " + std::to_string(hidden_dim) +
                      " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout_rate must be in [0, 1)");
  if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
}

std::string BackboneConfig::fingerprint() const {
  const std::string canon = "v=" + std::to_string(vocab_size) + ";t=" + std::to_string(max_seq_len) +
                            ";d=" + std::to_string(hidden_dim) + ";L=" + std::to_string(num_layers) +
                            ";h=" + std::to_string(num_heads) + ";f=" + std::to_string(ffn_dim);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(canon)));
  return buf;
}

Json BackboneConfig::to_json() const {
  return Json{{"vocab_size", vocab_size}, {"max_seq_len", max_seq_len},
              {"hidden_dim", hidden_dim}, {"num_layers", num_layers},
              {"num_heads", num_heads},   {"ffn_dim", ffn_dim},
              {"dropout_rate", dropout_rate}, {"ln_eps", ln_eps}};
}

BackboneConfig BackboneConfig::from_json(const Json& j, const std::string& path) {
  JsonReader r(j, path);
  BackboneConfig c;
  c.vocab_size = r.get("vocab_size", c.vocab_size);
  c.max_seq_len = r.get("max_seq_len", c.max_seq_len);
  c.hidden_dim = r.get("hidden_dim", c.hidden_dim);
  c.num_layers = r.get("num_layers", c.num_layers);
  c.num_heads = r.get("num_heads", c.num_heads);
  c.ffn_dim = r.get("ffn_dim", c.ffn_dim);
  c.dropout_rate = r.get("dropout_rate", c.dropout_rate);
  c.ln_eps = r.get("ln_eps", c.ln_eps);
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

namespace {

Tensor normal_param(const std::string& name, ad::Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(ad::shape_numel(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::parameter(name, std::move(shape), std::move(v));
}

Tensor const_param(const std::string& name, ad::Shape shape, double value) {
  return Tensor::parameter(name, shape, std::vector<double>(ad::shape_numel(shape), value));
}

}  // namespace

BackboneParams BackboneParams::init(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, "backbone"));
  const std::size_t d = config.hidden_dim, f = config.ffn_dim;
  // Embeddings are small (the embedding norm rescales them); weight matrices
  // use std 1/sqrt(fan_in).
  const double sd = 0.02;
  const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double sd_f = 1.0 / std::sqrt(static_cast<double>(f));
  BackboneParams p;
  p.config = config;
  p.token_embedding = normal_param("embed.token", {config.vocab_size, d}, sd, rng);
  p.position_embedding = normal_param("embed.position", {config.max_seq_len, d}, sd, rng);
  p.embed_norm = {const_param("embed.norm.gain", {d}, 1.0), const_param("embed.norm.bias", {d}, 0.0)};
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const std::string pre = "layer." + std::to_string(l) + ".";
    EncoderLayerParams L;
    L.wq = normal_param(pre + "attn.q.weight", {d, d}, sd_d, rng);
    L.bq = const_param(pre + "attn.q.bias", {d}, 0.0);
    L.wk = normal_param(pre + "attn.k.weight", {d, d}, sd_d, rng);
    L.bk = const_param(pre + "attn.k.bias", {d}, 0.0);
    L.wv = normal_param(pre + "attn.v.weight", {d, d}, sd_d, rng);
    L.bv = const_param(pre + "attn.v.bias", {d}, 0.0);
    L.wo = normal_param(pre + "attn.o.weight", {d, d}, sd_d, rng);
    L.bo = const_param(pre + "attn.o.bias", {d}, 0.0);
    L.attn_norm = {const_param(pre + "attn_norm.gain", {d}, 1.0),
                   const_param(pre + "attn_norm.bias", {d}, 0.0)};
    L.ffn_in_w = normal_param(pre + "ffn.in.weight", {d, f}, sd_d, rng);
    L.ffn_in_b = const_param(pre + "ffn.in.bias", {f}, 0.0);
    L.ffn_out_w = normal_param(pre + "ffn.out.weight", {f, d}, sd_f, rng);
    L.ffn_out_b = const_param(pre + "ffn.out.bias", {d}, 0.0);
    L.ffn_norm = {const_param(pre + "ffn_norm.gain", {d}, 1.0),
                  const_param(pre + "ffn_norm.bias", {d}, 0.0)};
    p.layers.push_back(std::move(L));
  }
  return p;
}

ad::ParamSet BackboneParams::params() const {
  ad::ParamSet ps;
  ps.add(token_embedding);
  ps.add(position_embedding);
  ps.add(embed_norm.gain);
  ps.add(embed_norm.bias);
  for (const auto& L : layers) {
    for (const Tensor& t : {L.wq, L.bq, L.wk, L.bk, L.wv, L.bv, L.wo, L.bo, L.attn_norm.gain,
                            L.attn_norm.bias, L.ffn_in_w, L.ffn_in_b, L.ffn_out_w, L.ffn_out_b,
                            L.ffn_norm.gain, L.ffn_norm.bias}) {
      ps.add(t);
    }
  }
  return ps;
}

BackboneParams BackboneParams::from_params(const BackboneConfig& config, const ad::ParamSet& ps) {
  BackboneParams ref = init(config, 0);
  const auto names = ref.params().names();
  if (ps.size() != names.size()) {
    throw CompatibilityError("backbone parameter count " + std::to_string(ps.size()) +
                             " does not match config (" + std::to_string(names.size()) + ")");
  }
  auto take = [&](const Tensor& slot) {
    const Tensor& src = ps.get(slot.name());
    if (src.shape() != slot.shape()) {
      throw CompatibilityError("backbone tensor '" + slot.name() + "' has shape " +
                               ad::shape_str(src.shape()) + ", expected " +
                               ad::shape_str(slot.shape()));
    }
    return src;
  };
  BackboneParams p;
  p.config = config;
  p.token_embedding = take(ref.token_embedding);
  p.position_embedding = take(ref.position_embedding);
  p.embed_norm = {take(ref.embed_norm.gain), take(ref.embed_norm.bias)};
  for (const auto& R : ref.layers) {
    EncoderLayerParams L;
    L.wq = take(R.wq);
    L.bq = take(R.bq);
    L.wk = take(R.wk);
    L.bk = take(R.bk);
    L.wv = take(R.wv);
    L.bv = take(R.bv);
    L.wo = take(R.wo);
    L.bo = take(R.bo);
    L.attn_norm = {take(R.attn_norm.gain), take(R.attn_norm.bias)};
    L.ffn_in_w = take(R.ffn_in_w);
    L.ffn_in_b = take(R.ffn_in_b);
    L.ffn_out_w = take(R.ffn_out_w);
    L.ffn_out_b = take(R.ffn_out_b);
    L.ffn_norm = {take(R.ffn_norm.gain), take(R.ffn_norm.bias)};
    p.layers.push_back(std::move(L));
  }
  return p;
}

BackboneParams BackboneParams::clone() const {
  ad::ParamSet copies;
  for (const auto& t : params()) copies.add(t.clone());
  BackboneParams p = from_params(config, copies);
  p.pretrained = pretrained;
  return p;
}

TokenBatch TokenBatch::pack(std::span<const std::vector<int>* const> sequences) {
  if (sequences.empty()) throw DataError("cannot pack an empty batch");
  TokenBatch b;
  b.batch = sequences.size();
  for (const auto* s : sequences) {
    if (s->empty()) throw DataError("empty token sequence");
    b.seq = std::max(b.seq, s->size());
  }
  b.ids.assign(b.batch * b.seq, kPadToken);
  for (std::size_t i = 0; i < b.batch; ++i) {
    std::copy(sequences[i]->begin(), sequences[i]->end(), b.ids.begin() + i * b.seq);
    b.lengths.push_back(sequences[i]->size());
  }
  return b;
}

TokenBatch TokenBatch::pack(const std::vector<std::vector<int>>& sequences) {
  std::vector<const std::vector<int>*> ptrs;
  for (const auto& s : sequences) ptrs.push_back(&s);
  return pack(std::span<const std::vector<int>* const>(ptrs));
}

void HookSet::set(std::size_t layer, Tap tap, std::shared_ptr<const TapHook> hook) {
  if (layer >= hooks_.size()) {
    throw UsageError("hook layer " + std::to_string(layer) + " out of range");
  }
  hooks_[layer][static_cast<std::size_t>(tap)] = std::move(hook);
}

const TapHook* HookSet::at(std::size_t layer, Tap tap) const {
  if (layer >= hooks_.size()) return nullptr;
  return hooks_[layer][static_cast<std::size_t>(tap)].get();
}

Tensor add_and_norm(const TapContext& ctx) {
  return ad::layer_norm(ad::add(ctx.sublayer_out, ctx.residual), ctx.norm.gain, ctx.norm.bias,
                        ctx.ln_eps);
}

Tensor attention_sublayer(const EncoderLayerParams& L, const Tensor& x, const TokenBatch& batch,
                          std::size_t heads, Tensor* probs) {
  Tensor q = ad::linear(x, L.wq, L.bq);
  Tensor k = ad::linear(x, L.wk, L.bk);
  Tensor v = ad::linear(x, L.wv, L.bv);
  Tensor ctx = ad::scaled_dot_attention(q, k, v, heads, batch.lengths, probs);
  return ad::linear(ctx, L.wo, L.bo);
}

Tensor mha_forward(const EncoderLayerParams& L, const Tensor& x, const TokenBatch& batch,
                   std::size_t heads, double ln_eps, Tensor* probs) {
  Tensor a = attention_sublayer(L, x, batch, heads, probs);
  return ad::layer_norm(ad::add(a, x), L.attn_norm.gain, L.attn_norm.bias, ln_eps);
}

void check_sequence(const BackboneConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw DataError("empty token sequence");
  if (tokens.size() > config.max_seq_len) {
    throw DataError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                    std::to_string(config.max_seq_len));
  }
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

EncoderOutput encoder_forward(const BackboneParams& params, const TokenBatch& batch,
                              const HookSet* hooks, Rng* dropout_rng) {
  const BackboneConfig& cfg = params.config;
  const std::size_t b = batch.batch, t = batch.seq, d = cfg.hidden_dim;
  if (t > cfg.max_seq_len) {
    throw DataError("batch sequence length " + std::to_string(t) + " exceeds max_seq_len");
  }
  for (int id : batch.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    }
  }
  if (hooks) {
    for (std::size_t l = 0; l < hooks->num_layers(); ++l) {
      for (Tap tap : {Tap::bottom, Tap::top}) {
        const TapHook* h = hooks->at(l, tap);
        if (h && h->hidden_dim() != d) {
          throw ConfigError("hook at layer " + std::to_string(l) + " has hidden_dim " +
                            std::to_string(h->hidden_dim()) + ", encoder has " + std::to_string(d));
        }
      }
    }
  }
  const bool use_dropout = cfg.dropout_rate > 0.0 && dropout_rng != nullptr;
  auto maybe_dropout = [&](const Tensor& x) {
    return use_dropout ? ad::dropout(x, cfg.dropout_rate, *dropout_rng) : x;
  };

  std::vector<std::size_t> tok_rows(batch.ids.begin(), batch.ids.end());
  std::vector<std::size_t> pos_rows(b * t);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < t; ++j) pos_rows[i * t + j] = j;
  Tensor x = ad::add(ad::gather_rows(params.token_embedding, tok_rows),
                     ad::gather_rows(params.position_embedding, pos_rows));
  x = ad::reshape(x, {b, t, d});
  x = maybe_dropout(ad::layer_norm(x, params.embed_norm.gain, params.embed_norm.bias, cfg.ln_eps));

  EncoderOutput out;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const EncoderLayerParams& L = params.layers[l];
    Tensor a = maybe_dropout(attention_sublayer(L, x, batch, cfg.num_heads));
    TapContext bottom{l, Tap::bottom, a, x, L.attn_norm, cfg.ln_eps, batch};
    const TapHook* hb = hooks ? hooks->at(l, Tap::bottom) : nullptr;
    Tensor x1 = hb ? hb->apply(bottom) : add_and_norm(bottom);

    Tensor f = ad::linear(ad::nonlinearity(ad::linear(x1, L.ffn_in_w, L.ffn_in_b), ad::Activation::gelu),
                          L.ffn_out_w, L.ffn_out_b);
    f = maybe_dropout(f);
    TapContext top{l, Tap::top, f, x1, L.ffn_norm, cfg.ln_eps, batch};
    const TapHook* ht = hooks ? hooks->at(l, Tap::top) : nullptr;
    Tensor x2 = ht ? ht->apply(top) : add_and_norm(top);

    out.taps.push_back({x1, x2});
    x = x2;
  }
  out.hidden = x;
  return out;
}

// ---- pretraining ----

Json PretrainConfig::to_json() const {
  return Json{{"steps", steps},         {"batch_size", batch_size}, {"lr", lr},
              {"mask_rate", mask_rate}, {"weight_decay", weight_decay}, {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const Json& j, const std::string& path) {
  JsonReader r(j, path);
  PretrainConfig c;
  c.steps = r.get("steps", c.steps);
  c.batch_size = r.get("batch_size", c.batch_size);
  c.lr = r.get("lr", c.lr);
  c.mask_rate = r.get("mask_rate", c.mask_rate);
  c.weight_decay = r.get("weight_decay", c.weight_decay);
  c.seed = r.get("seed", c.seed);
  r.finish();
  if (c.batch_size < 1) throw ConfigError(path + ".batch_size: must be >= 1");
  if (!(c.mask_rate > 0.0 && c.mask_rate < 1.0)) throw ConfigError(path + ".mask_rate: must be in (0, 1)");
  return c;
}

namespace {

struct MaskedBatch {
  TokenBatch tokens;
  std::vector<std::size_t> rows;  // flat (b * t + pos) indices of masked positions
  std::vector<int> targets;
};

MaskedBatch mask_batch(std::span<const std::vector<int>* const> seqs, double rate, Rng& rng) {
  MaskedBatch mb;
  mb.tokens = TokenBatch::pack(seqs);
  const std::size_t t = mb.tokens.seq;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = *seqs[i];
    std::vector<std::size_t> chosen;
    const std::size_t first = (s.size() > 1 && s[0] == kClsToken) ? 1 : 0;
    for (std::size_t p = first; p < s.size(); ++p) {
      if (rng.bernoulli(rate)) chosen.push_back(p);
    }
    if (chosen.empty()) chosen.push_back(first + rng.below(s.size() - first));
    for (std::size_t p : chosen) {
      mb.rows.push_back(i * t + p);
      mb.targets.push_back(s[p]);
      mb.tokens.ids[i * t + p] = kMaskToken;
    }
  }
  return mb;
}

Tensor mlm_logits(const BackboneParams& params, const Tensor& mlm_bias, const MaskedBatch& mb) {
  EncoderOutput enc = encoder_forward(params, mb.tokens);
  Tensor h = ad::gather_rows(enc.hidden, mb.rows);
  return ad::add_bias(ad::matmul_transposed(h, params.token_embedding), mlm_bias);
}

}  // namespace

PretrainResult pretrain_mlm(const BackboneConfig& config,
                            const std::vector<std::vector<int>>& corpus,
                            const PretrainConfig& train) {
  if (corpus.empty()) throw DataError("pretraining corpus is empty");
  for (const auto& s : corpus) check_sequence(config, s);

  PretrainResult result;
  result.params = BackboneParams::init(config, train.seed);
  result.mlm_bias = Tensor::parameter("mlm.bias", {config.vocab_size},
                                      std::vector<double>(config.vocab_size, 0.0));
  if (train.steps == 0) return result;

  ad::ParamSet ps = result.params.params();
  ps.set_trainable(true);
  ps.add(result.mlm_bias);
  ad::AdamW opt({.lr = train.lr, .weight_decay = train.weight_decay});
  Rng sampler(derive_seed(train.seed, "pretrain.batches"));
  Rng masker(derive_seed(train.seed, "pretrain.mask"));
  Rng drop(derive_seed(train.seed, "pretrain.dropout"));

  for (std::size_t step = 0; step < train.steps; ++step) {
    std::vector<const std::vector<int>*> seqs;
    for (std::size_t i = 0; i < train.batch_size; ++i) seqs.push_back(&corpus[sampler.below(corpus.size())]);
    MaskedBatch mb = mask_batch(seqs, train.mask_rate, masker);

    ad::active_tape().clear();
    ps.zero_grad();
    EncoderOutput enc = encoder_forward(result.params, mb.tokens, nullptr, &drop);
    Tensor h = ad::gather_rows(enc.hidden, mb.rows);
    Tensor logits = ad::add_bias(ad::matmul_transposed(h, result.params.token_embedding), result.mlm_bias);
    Tensor loss = ad::cross_entropy(logits, mb.targets);
    ad::backward(loss);
    opt.step(ps, ad::linear_decay_lr(step, train.steps, train.lr));
    result.loss_history.push_back(loss.item());
  }
  result.final_loss = result.loss_history.back();
  ps.clear_grad();
  result.params.pretrained = true;
  return result;
}

double masked_token_accuracy(const BackboneParams& params, const Tensor& mlm_bias,
                             const std::vector<std::vector<int>>& corpus, double mask_rate,
                             std::uint64_t seed) {
  if (corpus.empty()) throw DataError("corpus is empty");
  ad::NoGradGuard guard;
  Rng masker(derive_seed(seed, "eval.mask"));
  std::size_t correct = 0, total = 0;
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < corpus.size(); start += chunk) {
    std::vector<const std::vector<int>*> seqs;
    for (std::size_t i = start; i < std::min(corpus.size(), start + chunk); ++i) seqs.push_back(&corpus[i]);
    MaskedBatch mb = mask_batch(seqs, mask_rate, masker);
    Tensor logits = mlm_logits(params, mlm_bias, mb);
    const std::size_t v = logits.dim(1);
    for (std::size_t r = 0; r < mb.targets.size(); ++r) {
      const auto row = logits.data().subspan(r * v, v);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == mb.targets[r];
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace adafuse

// ---- checkpoints ----

namespace adafuse {

void save_backbone(const std::filesystem::path& path, const BackboneParams& params,
                   const Tensor* mlm_bias, const Json& metadata) {
  Container c;
  c.config = params.config.to_json();
  c.fingerprint = params.config.fingerprint();
  c.metadata = metadata;
  c.metadata["pretrained"] = params.pretrained;
  c.tensors = copy_tensors(params.params());
  if (mlm_bias) {
    Tensor b = mlm_bias->detach();
    b.set_name("mlm.bias");
    c.tensors.push_back(b);
  }
  write_container(path, c);
}

BackboneCheckpoint load_backbone(const std::filesystem::path& path, const BackboneConfig* expected) {
  Container c = read_container(path);
  BackboneConfig config;
  try {
    config = BackboneConfig::from_json(c.config, "$.config");
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (c.fingerprint != config.fingerprint()) {
    throw FormatError(path.string() + ": fingerprint does not match the stored config");
  }
  if (expected && expected->fingerprint() != c.fingerprint) {
    throw CompatibilityError(path.string() + ": backbone fingerprint " + c.fingerprint +
                             " does not match expected " + expected->fingerprint());
  }
  BackboneCheckpoint out;
  ad::ParamSet ps;
  for (const auto& t : c.tensors) {
    if (t.name() == "mlm.bias") {
      out.mlm_bias = t;
    } else {
      ps.add(t);
    }
  }
  out.params = BackboneParams::from_params(config, ps);
  out.params.params().set_trainable(true);
  out.params.pretrained = c.metadata.value("pretrained", false);
  out.metadata = c.metadata;
  return out;
}

}  // namespace adafuse
