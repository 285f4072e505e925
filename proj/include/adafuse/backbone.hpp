// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "adafuse/autodiff/ops.hpp"
#include "adafuse/autodiff/param_set.hpp"
#include "adafuse/json_util.hpp"
#include "adafuse/rng.hpp"

namespace adafuse {

// Reserved vocabulary entries. Regular tokens start at kFirstRegularToken.
inline constexpr int kPadToken = 0;
inline constexpr int kMaskToken = 1;
inline constexpr int kClsToken = 2;
inline constexpr int kFirstRegularToken = 3;

struct BackboneConfig {
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 32;
  std::size_t hidden_dim = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  double dropout_rate = 0.0;
  double ln_eps = 1e-5;

  void validate() const;
  /// Hash of the structural dimensions. Adapter and fusion checkpoints carry
  /// it and refuse to load into a backbone with a different one.
  std::string fingerprint() const;

  Json to_json() const;
  static BackboneConfig from_json(const Json& j, const std::string& path = "$.backbone");
};

struct LayerNormParams {
  ad::Tensor gain;
  ad::Tensor bias;
};

struct EncoderLayerParams {
  ad::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  LayerNormParams attn_norm;
  ad::Tensor ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
  LayerNormParams ffn_norm;
};

/// Encoder weights. params() lists them in this fixed order, which is also
/// the checkpoint order:
///   embed.token, embed.position, embed.norm.gain, embed.norm.bias, then per
///   layer l: layer.l.attn.{q,k,v,o}.{weight,bias}, layer.l.attn_norm.{gain,bias},
///   layer.l.ffn.{in,out}.{weight,bias}, layer.l.ffn_norm.{gain,bias}
struct BackboneParams {
  BackboneConfig config;
  ad::Tensor token_embedding;     // [vocab x d]
  ad::Tensor position_embedding;  // [max_seq_len x d]
  LayerNormParams embed_norm;
  std::vector<EncoderLayerParams> layers;
  // False for a randomly initialized encoder; trainers tag runs built on one.
  bool pretrained = false;

  /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
  static BackboneParams init(const BackboneConfig& config, std::uint64_t seed);
  ad::ParamSet params() const;
  BackboneParams clone() const;
  /// Rebuilds from a parameter set in params() order (used by checkpoints).
  static BackboneParams from_params(const BackboneConfig& config, const ad::ParamSet& params);
};

/// Padded token ids [batch x seq]; positions at or past lengths[b] hold
/// kPadToken and are masked out of attention.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;
  std::vector<std::size_t> lengths;

  static TokenBatch pack(std::span<const std::vector<int>* const> sequences);
  static TokenBatch pack(const std::vector<std::vector<int>>& sequences);
};

enum class Tap { bottom, top };

/// What a hook sees at one tap: the sub-layer output (attention or FFN), the
/// residual stream it would be added to, and the layer's pretrained norm.
struct TapContext {
  std::size_t layer;
  Tap tap;
  const ad::Tensor& sublayer_out;
  const ad::Tensor& residual;
  const LayerNormParams& norm;
  double ln_eps;
  const TokenBatch& batch;
};

/// Default post-norm wiring: norm(sublayer_out + residual).
ad::Tensor add_and_norm(const TapContext& ctx);

/// Replaces the add-and-norm step at one tap. Adapters and fusion are both
/// expressed as hooks, so the encoder never needs to know about them.
class TapHook {
 public:
  virtual ~TapHook() = default;
  virtual std::size_t hidden_dim() const = 0;
  virtual ad::Tensor apply(const TapContext& ctx) const = 0;
};

/// Hook that performs the default wiring.
class IdentityHook final : public TapHook {
 public:
  explicit IdentityHook(std::size_t hidden_dim) : hidden_dim_(hidden_dim) {}
  std::size_t hidden_dim() const override { return hidden_dim_; }
  ad::Tensor apply(const TapContext& ctx) const override { return add_and_norm(ctx); }

 private:
  std::size_t hidden_dim_;
};

class HookSet {
 public:
  explicit HookSet(std::size_t num_layers = 0) : hooks_(num_layers) {}
  void set(std::size_t layer, Tap tap, std::shared_ptr<const TapHook> hook);
  const TapHook* at(std::size_t layer, Tap tap) const;
  std::size_t num_layers() const { return hooks_.size(); }

 private:
  std::vector<std::array<std::shared_ptr<const TapHook>, 2>> hooks_;
};

/// Layer outputs after the attention block (bottom) and the FFN block (top),
/// each [batch x seq x d].
struct LayerTap {
  ad::Tensor bottom;
  ad::Tensor top;
};

struct EncoderOutput {
  ad::Tensor hidden;  // [batch x seq x d]
  std::vector<LayerTap> taps;
};

/// Post-layer-norm encoder. Hooks replace the add-and-norm at their tap; a
/// hook whose hidden_dim differs from the encoder's raises ConfigError.
/// Dropout is applied only when the config rate is positive and `dropout_rng`
/// is given.
EncoderOutput encoder_forward(const BackboneParams& params, const TokenBatch& batch,
                              const HookSet* hooks = nullptr, Rng* dropout_rng = nullptr);

/// Projected multi-head attention output, before residual and norm.
ad::Tensor attention_sublayer(const EncoderLayerParams& layer, const ad::Tensor& x,
                              const TokenBatch& batch, std::size_t heads,
                              ad::Tensor* probs = nullptr);

/// norm(x + attention_sublayer(x)).
ad::Tensor mha_forward(const EncoderLayerParams& layer, const ad::Tensor& x,
                       const TokenBatch& batch, std::size_t heads, double ln_eps,
                       ad::Tensor* probs = nullptr);

// ---- masked-token pretraining ----

struct PretrainConfig {
  std::size_t steps = 1500;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double mask_rate = 0.15;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  Json to_json() const;
  static PretrainConfig from_json(const Json& j, const std::string& path = "$.pretrain");
};

struct PretrainResult {
  BackboneParams params;
  ad::Tensor mlm_bias;  // [vocab]; output projection is tied to the token table
  double final_loss = 0.0;
  std::vector<double> loss_history;
};

/// Masked-token pretraining: each non-CLS position is replaced by kMaskToken
/// with probability mask_rate (at least one per sequence) and the loss is the
/// cross-entropy of the original token at masked positions only.
PretrainResult pretrain_mlm(const BackboneConfig& config,
                            const std::vector<std::vector<int>>& corpus,
                            const PretrainConfig& train);

/// Accuracy of recovering masked tokens on `corpus` with a fixed masking seed.
double masked_token_accuracy(const BackboneParams& params, const ad::Tensor& mlm_bias,
                             const std::vector<std::vector<int>>& corpus, double mask_rate,
                             std::uint64_t seed);

// ---- checkpoints ----

struct BackboneCheckpoint {
  BackboneParams params;
  ad::Tensor mlm_bias;  // undefined when the file carries none
  Json metadata;
};

/// Saves the encoder (and the MLM output bias when given) in the tensor
/// container format.
void save_backbone(const std::filesystem::path& path, const BackboneParams& params,
                   const ad::Tensor* mlm_bias, const Json& metadata);

/// Loads an encoder. With `expected` set, a fingerprint mismatch raises
/// CompatibilityError.
BackboneCheckpoint load_backbone(const std::filesystem::path& path,
                                 const BackboneConfig* expected = nullptr);

/// Validates token ids and lengths against the config (DataError).
void check_sequence(const BackboneConfig& config, std::span<const int> tokens);

}  // namespace adafuse
