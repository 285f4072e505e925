// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "adafuse/adapters.hpp"
#include "adafuse/backbone.hpp"

namespace adafuse {

enum class FusionRegularizer { identity_deviation, plain };

struct FusionConfig {
  // identity_deviation penalizes ||V - I||^2, plain penalizes ||V||^2.
  FusionRegularizer regularizer = FusionRegularizer::identity_deviation;
  // Leaves the last encoder layer without fusion and adapters.
  bool drop_last_layer = false;
  double qk_init_std = 0.02;
  double value_noise_norm = 1e-6;

  Json to_json() const;
  static FusionConfig from_json(const Json& j, const std::string& path = "$.fusion");
};

/// Per-layer Query/Key/Value matrices mixing N member adapters for one
/// target task. Tensors are named "fusion.layer.<l>.<query|key|value>".
struct FusionParams {
  std::string target;
  std::vector<std::string> members;
  FusionConfig config;
  std::string backbone_fingerprint;
  std::size_t hidden_dim = 0;
  std::size_t num_layers = 0;
  std::vector<ad::Tensor> query, key, value;  // one [d x d] per layer

  std::size_t num_members() const { return members.size(); }
  /// Layers that carry fusion (all of them unless drop_last_layer).
  std::size_t active_layers() const;
  ad::ParamSet params() const;
  FusionParams clone() const;
};

/// Q, K ~ normal(0, qk_init_std); V = I + E where E has a zero diagonal and
/// Frobenius norm exactly value_noise_norm. Members must share the backbone
/// fingerprint, placement set and pretrained-norm wiring (CompatibilityError).
FusionParams fusion_init(const BackboneConfig& backbone, std::span<const AdapterParams> members,
                         std::uint64_t seed, const std::string& target = "",
                         const FusionConfig& config = {});

struct FusionOutput {
  ad::Tensor output;   // [b x t x d]
  ad::Tensor weights;  // [b x t x N]
};

/// q = h Q_l, key_n = z_n K_l, s = softmax_n(q . key_n), o = sum_n s_n z_n V_l.
FusionOutput fusion_forward(const FusionParams& psi, const ad::Tensor& h,
                            std::span<const ad::Tensor> z, std::size_t layer);

/// lambda * sum_l ||V_l - I||_F^2 (or ||V_l||_F^2 for the plain form).
ad::Tensor fusion_regularizer(const FusionParams& psi, double lambda);

/// Running sums of fusion weights over valid (non-pad) positions.
class FusionTraceAccumulator {
 public:
  FusionTraceAccumulator(std::size_t num_layers, std::size_t num_members);
  void add(std::size_t layer, const ad::Tensor& weights, const TokenBatch& batch);
  void count_instances(std::size_t n) { instances_ += n; }

  std::size_t num_layers() const { return sums_.size(); }
  std::size_t positions(std::size_t layer) const { return positions_[layer]; }
  std::size_t instances() const { return instances_; }
  /// Largest |sum_n s_n - 1| seen at any single position.
  double max_row_sum_error() const { return max_row_error_; }
  std::vector<double> means(std::size_t layer) const;

 private:
  std::vector<std::vector<double>> sums_;
  std::vector<std::size_t> positions_;
  std::size_t instances_ = 0;
  double max_row_error_ = 0.0;
};

/// Mean fusion weight per layer and member over all positions of all
/// evaluated instances (positions pooled). Layers without fusion are empty.
struct FusionActivationTrace {
  std::string target;
  std::vector<std::string> members;
  std::vector<std::vector<double>> layers;
  std::size_t instance_count = 0;
  double max_row_sum_error = 0.0;

  Json to_json() const;
  static FusionActivationTrace from_json(const Json& j);
};

/// Hook mixing the members' outputs at one (layer, tap). When `trace` is set
/// the weights at the top tap are accumulated into it.
class FusionHook final : public TapHook {
 public:
  FusionHook(const FusionParams& psi, std::span<const AdapterParams> members, std::size_t layer,
             Tap tap, FusionTraceAccumulator* trace = nullptr);
  std::size_t hidden_dim() const override { return psi_.hidden_dim; }
  ad::Tensor apply(const TapContext& ctx) const override;

 private:
  FusionParams psi_;  // shares tensors with the caller's parameters
  AdapterConfig wiring_;
  std::vector<AdapterConfig> configs_;
  std::vector<AdapterBlock> blocks_;
  std::size_t layer_;
  FusionTraceAccumulator* trace_;
};

/// Registers fusion hooks at every placement of every active layer.
void install_fusion(HookSet& hooks, const FusionParams& psi, std::span<const AdapterParams> members,
                    FusionTraceAccumulator* trace = nullptr);

/// Runs the fused model over `sequences` (no gradients) and averages the
/// fusion weights per layer.
FusionActivationTrace trace_activations(const FusionParams& psi, const BackboneParams& theta,
                                        std::span<const AdapterParams> members,
                                        const std::vector<std::vector<int>>& sequences,
                                        std::size_t batch_size = 64);

// ---- checkpoints ----

void serialize_fusion(const FusionParams& psi, const Json& metadata,
                      const std::filesystem::path& path);
FusionParams deserialize_fusion(const std::filesystem::path& path, const BackboneConfig& backbone,
                                Json* metadata = nullptr);

}  // namespace adafuse
