// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "adafuse/autodiff/ops.hpp"
#include "adafuse/autodiff/param_set.hpp"
#include "adafuse/backbone.hpp"
#include "adafuse/json_util.hpp"

namespace adafuse {

enum class NewLnPosition { none, before_adapter, after_adapter, inside };
enum class AdapterPreset { pfeiffer, houlsby, custom };
enum class InitStyle { identity_zero, full_random };

std::string to_string(NewLnPosition p);
std::string to_string(AdapterPreset p);
std::string to_string(InitStyle s);
std::string to_string(Tap t);
NewLnPosition parse_new_ln(const std::string& text);
AdapterPreset parse_preset(const std::string& text);
InitStyle parse_init_style(const std::string& text);
Tap parse_tap(const std::string& text);

struct AdapterConfig {
  bool place_top = true;
  bool place_bottom = false;
  std::size_t reduction_factor = 16;
  ad::Nonlinearity nonlinearity{ad::Activation::relu};
  bool residual = true;
  // Pretrained layer norm positions; both false means "none".
  bool ln_before = true;
  bool ln_after = true;
  NewLnPosition new_ln = NewLnPosition::none;
  AdapterPreset preset = AdapterPreset::pfeiffer;
  InitStyle init_style = InitStyle::identity_zero;

  /// Single adapter after the FFN block, wrapped by both pretrained norms.
  static AdapterConfig pfeiffer(std::size_t reduction_factor = 16);
  /// Adapters after the attention and after the FFN block.
  static AdapterConfig houlsby(std::size_t reduction_factor = 16);

  /// The preset tag implied by the structural fields.
  AdapterPreset implied_preset() const;
  /// Sets `preset` from the structural fields.
  AdapterConfig& retag();

  std::vector<Tap> placements() const;
  bool has(Tap tap) const { return tap == Tap::top ? place_top : place_bottom; }
  std::size_t bottleneck_dim(std::size_t hidden_dim) const;

  /// Checks internal consistency and, when hidden_dim > 0, divisibility.
  void validate(std::size_t hidden_dim = 0) const;

  Json to_json() const;
  static AdapterConfig from_json(const Json& j, const std::string& path = "$.adapter");
};

/// One bottleneck module at one (layer, tap).
struct AdapterBlock {
  ad::Tensor down_w;  // [d x m]
  ad::Tensor down_b;  // [m]
  ad::Tensor up_w;    // [m x d]
  ad::Tensor up_b;    // [d]
  ad::Tensor ln_gain;  // new layer norm; undefined when new_ln is none
  ad::Tensor ln_bias;
};

/// Adapter parameters for one task. Tensor names follow
/// "layer.<l>.<top|bottom>.<down|up>.<weight|bias>" and
/// "layer.<l>.<tap>.new_ln.<gain|bias>".
struct AdapterParams {
  std::string task;
  AdapterConfig config;
  std::string backbone_fingerprint;
  std::size_t hidden_dim = 0;
  std::size_t num_layers = 0;
  std::vector<std::array<std::optional<AdapterBlock>, 2>> blocks;

  const AdapterBlock& block(std::size_t layer, Tap tap) const;
  ad::ParamSet params() const;
  AdapterParams clone() const;
};

/// Fresh adapter: down-projection normal(0, 0.01), up-projection and biases
/// zero (identity_zero), so the module is an exact identity map when
/// residual is on. full_random also draws the up-projection from normal(0, 0.01).
AdapterParams make_adapter(const BackboneConfig& backbone, const AdapterConfig& config,
                           std::uint64_t seed, const std::string& task = "");

/// Bottleneck module on x [b x t x d]:
/// [new LN before] -> down -> [new LN inside] -> nonlinearity -> up ->
/// [new LN after] -> (+x when residual).
ad::Tensor adapter_forward(const AdapterParams& phi, const ad::Tensor& x, std::size_t layer,
                           Tap tap);
ad::Tensor adapter_block_forward(const AdapterBlock& block, const AdapterConfig& config,
                                 const ad::Tensor& x, double ln_eps);

/// Input handed to adapters at a tap: the pretrained norm of sublayer +
/// residual when ln_before is set, otherwise the raw sub-layer output.
ad::Tensor adapter_input(const AdapterConfig& config, const TapContext& ctx);
/// Output of a tap given the adapter result y: norm(y + residual) when
/// ln_after is set; y alone after a "before" norm; y + residual otherwise.
ad::Tensor adapter_output(const AdapterConfig& config, const TapContext& ctx, const ad::Tensor& y);

/// Scalar parameter count in closed form.
std::size_t param_count(const AdapterConfig& config, const BackboneConfig& backbone);

/// Hook running one adapter block at its tap.
class AdapterHook final : public TapHook {
 public:
  AdapterHook(const AdapterParams& phi, std::size_t layer, Tap tap);
  std::size_t hidden_dim() const override { return hidden_dim_; }
  ad::Tensor apply(const TapContext& ctx) const override;

 private:
  AdapterConfig config_;
  AdapterBlock block_;
  std::size_t hidden_dim_;
};

/// Registers a hook for every (layer, placement) of `phi`. Layers listed in
/// `skip_layers` keep the default wiring.
void install_adapter(HookSet& hooks, const AdapterParams& phi,
                     const std::vector<std::size_t>& skip_layers = {});

// ---- checkpoints ----

void serialize_adapter(const AdapterParams& phi, const Json& metadata,
                       const std::filesystem::path& path);
/// Validates magic, version, fingerprint (CompatibilityError) and shapes.
AdapterParams deserialize_adapter(const std::filesystem::path& path, const BackboneConfig& backbone,
                                  Json* metadata = nullptr);

}  // namespace adafuse
