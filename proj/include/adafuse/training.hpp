// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "adafuse/adapters.hpp"
#include "adafuse/backbone.hpp"
#include "adafuse/fusion.hpp"
#include "adafuse/json_util.hpp"
#include "adafuse/tasks.hpp"

namespace adafuse {

enum class Schedule { linear_decay, constant };
enum class MtSampling { proportional, sqrt, uniform };

std::string to_string(Schedule s);
std::string to_string(MtSampling s);

struct TrainConfig {
  double base_lr = 1e-4;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 30;
  std::size_t early_stop_patience = 3;
  // Dev evaluation interval in steps; 0 evaluates once per epoch.
  std::size_t eval_every = 0;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
  Schedule schedule = Schedule::linear_decay;
  MtSampling mt_sampling = MtSampling::sqrt;
  double fusion_lambda = 0.01;
  // Stage 2 starts from a fresh head unless this is set and a head is given.
  bool reuse_head = false;

  /// Stage-1 defaults: lr 1e-4, at most 30 epochs.
  static TrainConfig adapter_defaults();
  /// Stage-2 defaults: lr 5e-5, at most 10 epochs.
  static TrainConfig fusion_defaults();

  void validate() const;
  Json to_json() const;
  /// Keys missing from `j` keep the values of `base`.
  static TrainConfig from_json(const Json& j, const std::string& path, const TrainConfig& base);
  static TrainConfig from_json(const Json& j, const std::string& path);
};

inline TrainConfig TrainConfig::from_json(const Json& j, const std::string& path) {
  return from_json(j, path, TrainConfig{});
}

/// Learning rates offered for the stage-2 sweep.
inline const std::vector<double> kFusionLrGrid = {6e-6, 5e-5, 1e-4, 2e-4};

/// Linear classifier on the first-token representation.
struct ClassifierHead {
  std::string task;
  ad::Tensor weight;  // [d x c]
  ad::Tensor bias;    // [c]

  static ClassifierHead init(const std::string& task, std::size_t hidden_dim,
                             std::size_t num_classes, std::uint64_t seed);
  std::size_t num_classes() const { return bias.numel(); }
  ad::ParamSet params() const;
  ClassifierHead clone() const;
};

/// Backbone plus optional hooks plus a head.
struct Model {
  const BackboneParams* theta = nullptr;
  const HookSet* hooks = nullptr;
  const ClassifierHead* head = nullptr;
};

/// Class logits [b x c] for a batch.
ad::Tensor model_logits(const Model& model, const TokenBatch& batch, Rng* dropout_rng = nullptr);

struct EvalResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::size_t> class_correct;
  std::vector<std::size_t> class_total;
};

/// Argmax accuracy; ties go to the lowest class index.
EvalResult evaluate(const Model& model, const InstanceSet& split, std::size_t batch_size = 64);

/// Checks every sequence of `task` against the backbone (ConfigError).
void check_task_fits(const BackboneConfig& config, const TaskDataset& task);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_accuracy = 0.0;
  std::map<std::string, double> task_dev_accuracy;  // multi-task runs
};

struct RunRecord {
  std::string mode;
  std::vector<std::string> tasks;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_dev_accuracy = 0.0;
  std::map<std::string, double> dev_accuracy;   // final, per task
  std::map<std::string, double> test_accuracy;  // final, per task
  double wall_time_s = 0.0;
  std::uint64_t seed = 0;
  bool backbone_pretrained = true;
  Json config = Json::object();
  // Set digests keyed "theta", "adapter:<task>", "fusion", "head:<task>".
  std::map<std::string, std::string> digest_before;
  std::map<std::string, std::string> digest_after;
  // Sequential runs: accuracy on every task after every stage.
  std::vector<std::map<std::string, double>> stage_dev_accuracy;
  Json extra = Json::object();

  /// Names whose digest changed between before and after.
  std::vector<std::string> changed() const;
  /// Everything except wall time.
  Json metrics_json() const;
  Json to_json() const;
  static RunRecord from_json(const Json& j);
};

struct StAdapterResult {
  AdapterParams adapter;
  ClassifierHead head;
  RunRecord record;
};

/// Stage 1, single task: trains only the adapter and head on a frozen copy
/// of theta0. Safe to run concurrently with other runs sharing theta0.
StAdapterResult train_st_adapter(const BackboneParams& theta0, const TaskDataset& task,
                                 const AdapterConfig& adapter, const TrainConfig& train);

/// Per-task batch probabilities for multi-task sampling.
std::vector<double> sampling_probabilities(const std::vector<std::size_t>& sizes, MtSampling mode);
/// Task index drawn from `probs`.
std::size_t sample_task(const std::vector<double>& probs, Rng& rng);

struct MtAdapterResult {
  BackboneParams theta;
  std::vector<AdapterParams> adapters;
  std::vector<ClassifierHead> heads;
  RunRecord record;
};

/// Stage 1, multi-task: trains a copy of theta0 jointly with one adapter and
/// head per task; every batch comes from one task.
MtAdapterResult train_mt_adapters(const BackboneParams& theta0,
                                  const std::vector<const TaskDataset*>& tasks,
                                  const AdapterConfig& adapter, const TrainConfig& train);

struct FusionResult {
  FusionParams psi;
  ClassifierHead head;
  FusionActivationTrace trace;
  RunRecord record;
};

/// Stage 2: trains Psi and the target head with theta and every adapter
/// frozen; the dev split drives early stopping and the trace.
FusionResult train_fusion(const BackboneParams& theta, const std::vector<AdapterParams>& members,
                          const TaskDataset& target, const TrainConfig& train,
                          const FusionConfig& fusion = {}, const ClassifierHead* stage1_head = nullptr);

enum class BaselineMode { head_only, full, sequential };
std::string to_string(BaselineMode m);
BaselineMode parse_baseline_mode(const std::string& text);

struct BaselineResult {
  BackboneParams theta;
  std::vector<ClassifierHead> heads;
  RunRecord record;
};

/// head_only trains one head on frozen theta0; full trains theta and the head;
/// sequential runs full fine-tuning over `tasks` in order and evaluates every
/// task after every stage.
BaselineResult train_baseline(const BackboneParams& theta0,
                              const std::vector<const TaskDataset*>& tasks, BaselineMode mode,
                              const TrainConfig& train);

// ---- checkpoints ----

void save_head(const ClassifierHead& head, const std::string& fingerprint, const Json& metadata,
               const std::filesystem::path& path);
ClassifierHead load_head(const std::filesystem::path& path, const BackboneConfig& backbone);

}  // namespace adafuse
