// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "adafuse/backbone.hpp"
#include "adafuse/json_util.hpp"

namespace adafuse {

enum class TaskKind { keyword, parity, order, clone };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& text);

struct TaskLink {
  std::string task;
  double overlap = 0.0;  // fraction of markers shared, in [0, 1]
};

/// Task semantics over marker tokens:
///   keyword  label = the class whose marker subset appears in the sequence
///   parity   label = parity of the number of marker occurrences
///   order    label = 0 when an "a" marker precedes the "b" marker, else 1
///   clone    same semantics and markers as its (single) linked task, with
///            the link's overlap deciding how many markers are shared
struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::keyword;
  std::size_t num_classes = 2;
  std::size_t markers_per_class = 3;
  // Explicit markers, class-major ([class 0 markers..., class 1 markers...]).
  // Empty means "draw them".
  std::vector<int> markers;
  // keyword: up to this many marker occurrences; parity: maximum count.
  std::size_t max_markers = 2;
  std::size_t train_size = 800;
  std::size_t dev_size = 100;
  std::size_t test_size = 100;
  std::vector<TaskLink> links;
  std::uint64_t seed = 0;

  Json to_json() const;
  static TaskSpec from_json(const Json& j, const std::string& path);
};

struct VocabConfig {
  std::size_t vocab_size = 64;
  std::size_t min_len = 6;  // including the leading CLS token
  std::size_t max_len = 12;

  void validate() const;
  Json to_json() const;
  static VocabConfig from_json(const Json& j, const std::string& path = "$.suite.vocab");
};

struct SuiteConfig {
  VocabConfig vocab;
  std::vector<TaskSpec> tasks;
  std::size_t corpus_size = 2000;

  /// Six tasks over the default vocabulary: two large (4000), two medium
  /// (1000) and two small (200) training sets.
  static SuiteConfig default_suite();
  Json to_json() const;
  static SuiteConfig from_json(const Json& j, const std::string& path = "$.suite");
};

struct Instance {
  std::vector<int> tokens;  // starts with kClsToken
  int label = 0;
  bool operator==(const Instance&) const = default;
};

enum class SplitKind { train, dev, test };
std::string to_string(SplitKind kind);

struct InstanceSet {
  std::vector<Instance> items;
  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  std::vector<std::vector<int>> sequences() const;
  std::vector<std::size_t> class_histogram(std::size_t num_classes) const;
};

/// Splits are distinct types, so a function taking a DevSplit cannot be
/// handed test data by accident.
template <SplitKind K>
struct TypedSplit : InstanceSet {
  static constexpr SplitKind kind = K;
  TypedSplit() = default;
  explicit TypedSplit(std::vector<Instance> v) { items = std::move(v); }
};
using TrainSplit = TypedSplit<SplitKind::train>;
using DevSplit = TypedSplit<SplitKind::dev>;
using TestSplit = TypedSplit<SplitKind::test>;

struct TaskDataset {
  TaskSpec spec;
  TaskKind semantics = TaskKind::keyword;  // resolved kind for clones
  std::size_t num_classes = 2;
  std::vector<std::vector<int>> class_markers;
  TrainSplit train;
  DevSplit dev;
  TestSplit test;
};

struct Suite {
  VocabConfig vocab;
  std::vector<TaskDataset> tasks;
  std::vector<std::vector<int>> corpus;

  const TaskDataset& task(const std::string& name) const;
  std::vector<std::string> names() const;
};

/// Generates every task and an unlabeled pretraining corpus drawn from the
/// task distributions. A pure function of (config, seed).
Suite generate_suite(const SuiteConfig& config, std::uint64_t seed);

/// Label of `tokens` under a task's semantics.
int label_of(const TaskDataset& task, const std::vector<int>& tokens);

struct SplitResult {
  TrainSplit train;
  DevSplit dev;
  TestSplit test;
};

/// Label-stratified split with exact target sizes (integer allocation per
/// class). DataError when a split ends up smaller than the class count.
SplitResult split_by_sizes(std::vector<Instance> pool, std::array<std::size_t, 3> sizes,
                           std::size_t num_classes, std::uint64_t seed);
/// Same, with fractions that must sum to 1.
SplitResult split(std::vector<Instance> pool, std::array<double, 3> fractions,
                  std::size_t num_classes, std::uint64_t seed);

struct Batch {
  TokenBatch tokens;
  std::vector<int> labels;
};

/// Epoch-seeded shuffle, final partial batch included, padded per batch.
std::vector<Batch> batches(const InstanceSet& split, std::size_t batch_size, std::uint64_t seed,
                           std::size_t epoch);
/// In-order batches without shuffling (evaluation).
std::vector<Batch> ordered_batches(const InstanceSet& split, std::size_t batch_size);

/// Line-delimited JSON, one {"tokens": [...], "label": k} per line.
void export_ldjson(const InstanceSet& split, const std::filesystem::path& path);
std::vector<Instance> import_ldjson(const std::filesystem::path& path);

}  // namespace adafuse
