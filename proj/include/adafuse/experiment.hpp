// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "adafuse/analysis.hpp"
#include "adafuse/backbone.hpp"
#include "adafuse/fusion.hpp"
#include "adafuse/tasks.hpp"
#include "adafuse/training.hpp"

namespace adafuse {

inline constexpr const char* kExperimentSchema = "adafuse.experiment/1";

/// Mode names in dependency order.
const std::vector<std::string>& known_modes();

/// Requested modes plus the stage-1 modes the fusion modes build on, in
/// dependency order.
std::vector<std::string> expand_modes(const std::vector<std::string>& modes);

struct ExperimentConfig {
  std::uint64_t seed = 0;  // suite generation and pretraining
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string out;
  BackboneConfig backbone;
  // Unset: the backbone stays at its random initialization.
  std::optional<PretrainConfig> pretrain = PretrainConfig{};
  SuiteConfig suite = SuiteConfig::default_suite();
  std::vector<std::string> tasks;  // empty: every suite task
  std::vector<std::string> modes{"head", "full", "st-a", "mt-a", "fusion-st-a", "fusion-mt-a"};
  AdapterConfig adapter;
  FusionConfig fusion;
  std::vector<std::string> fusion_members;  // empty: every run task
  TrainConfig train_adapter = TrainConfig::adapter_defaults();
  TrainConfig train_mt = TrainConfig::adapter_defaults();
  TrainConfig train_fusion = TrainConfig::fusion_defaults();
  TrainConfig train_baseline = TrainConfig::adapter_defaults();
  GridSpec grid;
  std::size_t workers = 1;

  /// Cross-field checks: known modes, existing tasks and members, and a
  /// suite that fits the backbone. ConfigError names the field path.
  void validate() const;
  std::vector<std::string> run_tasks() const;
  std::vector<std::string> members() const;

  Json to_json() const;
  /// Requires "schema"; unknown keys anywhere are ConfigErrors.
  static ExperimentConfig from_json(const Json& j);
  /// ArtifactError when the file is missing, ConfigError when it is invalid.
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// Hash of the suite config and generation seed.
std::string suite_fingerprint(const SuiteConfig& suite, std::uint64_t seed);

// ---- files ----

/// Writes `path` through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);
/// ArtifactError when missing, FormatError when not JSON.
Json read_json_file(const std::filesystem::path& path);
/// Creates `dir`. An existing non-empty directory is an ArtifactError unless
/// `force` is set, in which case its contents are removed.
void prepare_output_dir(const std::filesystem::path& dir, bool force);

/// 2 for config errors, 3 for artifact and compatibility errors, 4 for budget
/// errors, 1 otherwise.
int exit_code_for(const std::exception& e);

// ---- pipeline ----

struct PreparedBackbone {
  BackboneParams params;
  ad::Tensor mlm_bias;
  Json metadata;
};

/// Random init, then masked-token pretraining on the suite corpus if enabled.
PreparedBackbone prepare_backbone(const ExperimentConfig& cfg, const Suite& suite);

/// Runs every requested mode for every seed in dependency order, writing
/// records, checkpoints, traces, heatmaps and summary.{json,md} under `out`.
/// Each mode's summary value is the per-task test accuracy.
RunSummary run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out, bool force,
                          std::size_t workers, std::ostream* log = nullptr);

}  // namespace adafuse
