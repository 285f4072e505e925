// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adafuse/adapters.hpp"
#include "adafuse/fusion.hpp"
#include "adafuse/json_util.hpp"
#include "adafuse/tasks.hpp"
#include "adafuse/training.hpp"

namespace adafuse {

// ---- architecture grid ----

enum class PlacementAxis { top, bottom, both };
enum class PretrainedLnAxis { before, after, before_and_after, none };

std::string to_string(PlacementAxis p);
std::string to_string(PretrainedLnAxis p);
PlacementAxis parse_placement_axis(const std::string& text);
PretrainedLnAxis parse_pretrained_ln_axis(const std::string& text);
/// Grid spelling of the new-norm positions: none, before, after, inside.
std::string grid_label(NewLnPosition p);
NewLnPosition parse_grid_new_ln(const std::string& text);

struct GridCell {
  std::size_t index = 0;
  PlacementAxis placement = PlacementAxis::top;
  PretrainedLnAxis pretrained_ln = PretrainedLnAxis::before_and_after;
  NewLnPosition new_ln = NewLnPosition::none;
  std::size_t reduction_factor = 16;
  ad::Activation nonlinearity = ad::Activation::relu;

  AdapterConfig adapter_config() const;
  /// "top/before_and_after/none/r16/relu".
  std::string label() const;
};

struct GridSpec {
  std::vector<PlacementAxis> placements{PlacementAxis::top, PlacementAxis::bottom,
                                        PlacementAxis::both};
  std::vector<PretrainedLnAxis> pretrained_ln{PretrainedLnAxis::before, PretrainedLnAxis::after,
                                              PretrainedLnAxis::before_and_after,
                                              PretrainedLnAxis::none};
  std::vector<NewLnPosition> new_ln{NewLnPosition::none, NewLnPosition::before_adapter,
                                    NewLnPosition::after_adapter, NewLnPosition::inside};
  std::vector<std::size_t> reduction_factors{2, 8, 16, 64};
  std::vector<ad::Activation> nonlinearities{ad::Activation::relu, ad::Activation::leaky_relu,
                                             ad::Activation::swish};
  std::vector<std::string> probe_tasks;  // empty: the first three suite tasks
  std::size_t max_cells = 600;

  std::size_t cell_count() const;
  /// The Cartesian product, placement-major, nonlinearity fastest.
  std::vector<GridCell> cells() const;
  Json to_json() const;
  static GridSpec from_json(const Json& j, const std::string& path = "$.grid");
};

/// The pfeiffer preset with the cell's r and nonlinearity, when the cell's
/// wiring is exactly the preset's.
std::optional<AdapterConfig> as_pfeiffer(const GridCell& cell);

struct GridCellResult {
  GridCell cell;
  std::map<std::string, double> task_dev_accuracy;  // mean over seeds
  double mean_dev_accuracy = 0.0;
  double mean_rank = 0.0;  // mean over tasks of the per-task rank (1 = best)
  bool best = false;
};

struct MarginalRow {
  std::vector<std::string> key;  // one value per grouped axis
  double mean_dev_accuracy = 0.0;
  std::size_t cells = 0;
};

struct MarginalTable {
  std::vector<std::string> axes;
  std::vector<MarginalRow> rows;
};

struct GridResult {
  std::vector<std::string> probe_tasks;
  std::vector<GridCellResult> cells;  // grid order
  std::size_t best_index = 0;
  std::vector<MarginalTable> marginals;

  /// Cells sorted by mean rank, then by mean accuracy, then by index.
  std::vector<const GridCellResult*> ranked() const;
  std::string csv() const;
  Json to_json() const;
};

/// Trains one ST-A per (cell, probe task, seed) and ranks the cells. Runs that
/// exceed the budget raise BudgetError before any training starts.
GridResult grid_search(const BackboneParams& theta, const Suite& suite, const GridSpec& grid,
                       const TrainConfig& train, const std::vector<std::uint64_t>& seeds,
                       std::size_t workers = 1);

/// Ranks and marginals from per-cell task accuracies (used by grid_search).
GridResult rank_grid(const std::vector<GridCell>& cells, const std::vector<std::string>& tasks,
                     const std::vector<std::map<std::string, double>>& accuracy);

// ---- activation heatmap ----

/// 1-based layers {1, ceil(7L/12), ceil(9L/12), L}, deduplicated.
std::vector<std::size_t> default_heatmap_layers(std::size_t num_layers);

struct HeatmapRow {
  std::size_t layer = 0;  // 1-based
  std::string target;
  std::string adapter;
  double mean_activation = 0.0;
};

/// One row per (layer, target, member). Every trace must carry the same
/// member list (UsageError); layers outside the trace are a UsageError and
/// untraced (frozen) layers are skipped.
std::vector<HeatmapRow> heatmap_rows(std::span<const FusionActivationTrace> traces,
                                     const std::vector<std::size_t>& layers);
std::string heatmap_csv(const std::vector<HeatmapRow>& rows);

// ---- summaries and comparisons ----

struct Stats {
  std::vector<double> values;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for one value
};

Stats make_stats(std::vector<double> values);

/// Display names for summary columns, keyed by mode: head, full, st-a, mt-a,
/// fusion-st-a, fusion-mt-a, sequential.
const std::vector<std::pair<std::string, std::string>>& summary_columns();

struct RunSummary {
  std::string suite_fingerprint;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> tasks;
  std::map<std::string, std::map<std::string, Stats>> modes;  // mode -> task -> dev accuracy

  /// Markdown table of mean +- std in accuracy points, one row per task.
  std::string markdown() const;
  Json to_json() const;
  static RunSummary from_json(const Json& j);
};

enum class Trend { improvement, same, decrease, absent };
std::string to_string(Trend t);
/// delta > 0.3 points: improvement; delta < -0.3: decrease; otherwise same.
Trend classify_delta(double delta_points);

struct CompareRow {
  std::string task;
  std::optional<double> base;   // points
  std::optional<double> other;  // points
  double delta = 0.0;
  Trend trend = Trend::absent;
};

struct CompareReport {
  std::string base_mode;
  std::string other_mode;
  std::vector<CompareRow> rows;

  bool complete() const;
  std::string markdown() const;
  std::string csv() const;
};

/// Per-task deltas of `other_mode` in `other` against `base_mode` in `base`.
/// Summaries of different suites raise UsageError.
CompareReport compare_runs(const RunSummary& base, const std::string& base_mode,
                           const RunSummary& other, const std::string& other_mode);

}  // namespace adafuse
