// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "adafuse/analysis.hpp"
#include "adafuse/error.hpp"

using namespace adafuse;

namespace {

BackboneConfig tiny_backbone() {
  BackboneConfig c;
  c.vocab_size = 32;
  c.max_seq_len = 12;
  c.hidden_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ffn_dim = 32;
  return c;
}

const Suite& suite() {
  static const Suite s = [] {
    SuiteConfig c;
    c.vocab.vocab_size = 32;
    c.vocab.min_len = 6;
    c.vocab.max_len = 10;
    c.corpus_size = 20;
    TaskSpec t;
    t.name = "a";
    t.kind = TaskKind::keyword;
    t.markers_per_class = 2;
    t.train_size = 200;
    t.dev_size = 100;
    t.test_size = 100;
    c.tasks = {t};
    t.name = "b";
    c.tasks.push_back(t);
    return generate_suite(c, 3);
  }();
  return s;
}

FusionActivationTrace trace(std::string target, std::vector<std::string> members,
                            std::vector<std::vector<double>> layers) {
  FusionActivationTrace t;
  t.target = std::move(target);
  t.members = std::move(members);
  t.layers = std::move(layers);
  t.instance_count = 10;
  return t;
}

RunSummary summary(std::string fingerprint, std::map<std::string, double> st,
                   std::map<std::string, double> fus) {
  RunSummary s;
  s.suite_fingerprint = std::move(fingerprint);
  s.seeds = {1};
  for (const auto& [t, v] : st) {
    s.tasks.push_back(t);
    s.modes["st-a"][t] = make_stats({v});
  }
  for (const auto& [t, v] : fus) s.modes["fusion-st-a"][t] = make_stats({v});
  return s;
}

}  // namespace

TEST(Grid, DefaultSpecIsTheFullCartesianProduct) {
  GridSpec spec;
  EXPECT_EQ(spec.cell_count(), 576u);
  const auto cells = spec.cells();
  ASSERT_EQ(cells.size(), 576u);
  std::set<std::string> labels;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    EXPECT_EQ(cells[i].index, i);
    labels.insert(cells[i].label());
  }
  EXPECT_EQ(labels.size(), 576u);
  // Nonlinearity varies fastest, placement slowest.
  EXPECT_EQ(cells[0].nonlinearity, ad::Activation::relu);
  EXPECT_EQ(cells[1].nonlinearity, ad::Activation::leaky_relu);
  EXPECT_EQ(cells[0].placement, PlacementAxis::top);
  EXPECT_EQ(cells[575].placement, PlacementAxis::both);
}

TEST(Grid, ParamCountMatchesInstantiatedAdapterForEveryCell) {
  BackboneConfig bb = tiny_backbone();
  bb.hidden_dim = 64;
  bb.ffn_dim = 64;
  bb.num_layers = 1;
  for (const auto& cell : GridSpec{}.cells()) {
    const AdapterConfig c = cell.adapter_config();
    const std::size_t d = 64, m = d / cell.reduction_factor;
    const std::size_t taps = cell.placement == PlacementAxis::both ? 2 : 1;
    std::size_t ln = 0;
    if (cell.new_ln == NewLnPosition::inside) ln = 2 * m;
    if (cell.new_ln == NewLnPosition::before_adapter || cell.new_ln == NewLnPosition::after_adapter) ln = 2 * d;
    const std::size_t expected = taps * (2 * d * m + m + d + ln);
    EXPECT_EQ(param_count(c, bb), expected) << cell.label();
    EXPECT_EQ(make_adapter(bb, c, 1).params().scalar_count(), expected) << cell.label();
  }
}

TEST(Grid, PfeifferPresetIsRepresentable) {
  const auto cells = GridSpec{}.cells();
  std::size_t matches = 0;
  for (const auto& cell : cells) {
    if (auto p = as_pfeiffer(cell)) {
      ++matches;
      EXPECT_EQ(p->to_json(), cell.adapter_config().to_json());
      EXPECT_EQ(p->preset, AdapterPreset::pfeiffer);
    }
  }
  // One wiring, four reduction factors, three nonlinearities.
  EXPECT_EQ(matches, 12u);
}

TEST(Grid, JsonRoundTripAndBudget) {
  GridSpec spec;
  spec.reduction_factors = {4};
  spec.nonlinearities = {ad::Activation::swish};
  spec.max_cells = 10;
  EXPECT_EQ(GridSpec::from_json(spec.to_json()).to_json(), spec.to_json());
  EXPECT_THROW(GridSpec::from_json(Json{{"placements", {"middle"}}}), ConfigError);

  const BackboneParams theta = BackboneParams::init(tiny_backbone(), 1);
  EXPECT_EQ(spec.cell_count(), 48u);
  EXPECT_THROW(grid_search(theta, suite(), spec, TrainConfig{}, {1}), BudgetError);
}

TEST(Grid, SingleCellEqualsStandaloneAdapterRun) {
  const BackboneParams theta = BackboneParams::init(tiny_backbone(), 1);
  GridSpec spec;
  spec.placements = {PlacementAxis::top};
  spec.pretrained_ln = {PretrainedLnAxis::before_and_after};
  spec.new_ln = {NewLnPosition::none};
  spec.reduction_factors = {4};
  spec.nonlinearities = {ad::Activation::relu};
  spec.probe_tasks = {"a"};
  TrainConfig tc;
  tc.base_lr = 3e-3;
  tc.batch_size = 16;
  tc.max_epochs = 1;
  const GridResult res = grid_search(theta, suite(), spec, tc, {4});
  ASSERT_EQ(res.cells.size(), 1u);
  tc.seed = 4;
  const auto direct = train_st_adapter(theta, suite().task("a"), spec.cells()[0].adapter_config(), tc);
  EXPECT_EQ(res.cells[0].task_dev_accuracy.at("a"), direct.record.dev_accuracy.at("a"));
  EXPECT_TRUE(res.cells[0].best);
}

TEST(Grid, RankingUsesAverageRanksAndMarginals) {
  GridSpec spec;
  spec.placements = {PlacementAxis::top, PlacementAxis::bottom};
  spec.pretrained_ln = {PretrainedLnAxis::after};
  spec.new_ln = {NewLnPosition::none};
  spec.reduction_factors = {2, 8};
  spec.nonlinearities = {ad::Activation::relu};
  const auto cells = spec.cells();
  // cells: top/r2, top/r8, bottom/r2, bottom/r8
  const std::vector<std::map<std::string, double>> acc{
      {{"x", 0.9}, {"y", 0.5}}, {{"x", 0.9}, {"y", 0.7}}, {{"x", 0.6}, {"y", 0.8}}, {{"x", 0.5}, {"y", 0.6}}};
  const GridResult r = rank_grid(cells, {"x", "y"}, acc);
  // x ranks: 1.5, 1.5, 3, 4; y ranks: 4, 2, 1, 3.
  EXPECT_DOUBLE_EQ(r.cells[0].mean_rank, 2.75);
  EXPECT_DOUBLE_EQ(r.cells[1].mean_rank, 1.75);
  EXPECT_DOUBLE_EQ(r.cells[2].mean_rank, 2.0);
  EXPECT_DOUBLE_EQ(r.cells[3].mean_rank, 3.5);
  EXPECT_EQ(r.best_index, 1u);
  EXPECT_EQ(r.ranked().front()->cell.index, 1u);
  ASSERT_EQ(r.marginals.size(), 5u);
  const auto& placement = r.marginals[0];
  ASSERT_EQ(placement.rows.size(), 2u);
  EXPECT_NEAR(placement.rows[0].mean_dev_accuracy, (0.7 + 0.8) / 2, 1e-12);
  EXPECT_EQ(placement.rows[0].cells, 2u);
  EXPECT_NE(r.csv().find("mean_rank"), std::string::npos);
}

TEST(Heatmap, DefaultLayers) {
  EXPECT_EQ(default_heatmap_layers(12), (std::vector<std::size_t>{1, 7, 9, 12}));
  EXPECT_EQ(default_heatmap_layers(2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(default_heatmap_layers(1), (std::vector<std::size_t>{1}));
}

TEST(Heatmap, RowsAndCsv) {
  const std::vector<FusionActivationTrace> traces{
      trace("t1", {"p", "q"}, {{0.25, 0.75}, {0.5, 0.5}, {}}),
      trace("t2", {"p", "q"}, {{0.9, 0.1}, {0.4, 0.6}, {}})};
  const auto rows = heatmap_rows(traces, {1, 3});
  ASSERT_EQ(rows.size(), 4u);  // layer 3 is untraced
  double sum = 0.0;
  for (const auto& r : rows) {
    if (r.target == "t1") sum += r.mean_activation;
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_EQ(heatmap_csv(rows).substr(0, 39), "layer,target_task,adapter,mean_activati");
  EXPECT_THROW(heatmap_rows(traces, {4}), UsageError);
  const std::vector<FusionActivationTrace> mixed{traces[0], trace("t3", {"q", "p"}, {{0.5, 0.5}})};
  EXPECT_THROW(heatmap_rows(mixed, {1}), UsageError);
}

TEST(Heatmap, SingleMemberIsAlwaysOne) {
  const std::vector<FusionActivationTrace> traces{trace("t", {"only"}, {{1.0}, {1.0}})};
  for (const auto& r : heatmap_rows(traces, {1, 2})) EXPECT_EQ(r.mean_activation, 1.0);
}

TEST(Summary, SampleStdAndMarkdown) {
  const Stats s = make_stats({0.8, 0.9, 1.0});
  EXPECT_NEAR(s.mean, 0.9, 1e-12);
  EXPECT_NEAR(s.std, 0.1, 1e-12);
  EXPECT_EQ(make_stats({0.5}).std, 0.0);

  RunSummary r = summary("fp", {{"a", 0.8}}, {{"a", 0.9}});
  const std::string md = r.markdown();
  EXPECT_NE(md.find("Fusion w/ ST-A"), std::string::npos);
  EXPECT_NE(md.find("80.00"), std::string::npos);
  EXPECT_EQ(RunSummary::from_json(r.to_json()).to_json(), r.to_json());
}

TEST(Compare, TrendThresholds) {
  EXPECT_EQ(classify_delta(0.31), Trend::improvement);
  EXPECT_EQ(classify_delta(0.29), Trend::same);
  EXPECT_EQ(classify_delta(-0.29), Trend::same);
  EXPECT_EQ(classify_delta(-0.31), Trend::decrease);
  EXPECT_EQ(classify_delta(0.0), Trend::same);
}

TEST(Compare, RowsAndAbsentTasks) {
  const RunSummary base = summary("fp", {{"a", 0.800}, {"b", 0.700}, {"c", 0.5}}, {});
  const RunSummary other = summary("fp", {}, {{"a", 0.8031}, {"b", 0.6969}});
  const CompareReport rep = compare_runs(base, "st-a", other, "fusion-st-a");
  ASSERT_EQ(rep.rows.size(), 3u);
  EXPECT_EQ(rep.rows[0].trend, Trend::improvement);
  EXPECT_EQ(rep.rows[1].trend, Trend::decrease);
  EXPECT_EQ(rep.rows[2].trend, Trend::absent);
  EXPECT_FALSE(rep.complete());
  EXPECT_NE(rep.markdown().find("↗"), std::string::npos);
  EXPECT_NE(rep.csv().find("absent"), std::string::npos);

  const CompareReport same = compare_runs(base, "st-a", base, "st-a");
  EXPECT_TRUE(same.complete());
  for (const auto& r : same.rows) EXPECT_EQ(r.trend, Trend::same);
}

TEST(Compare, DifferentSuitesAreRejected) {
  EXPECT_THROW(compare_runs(summary("x", {{"a", 0.5}}, {}), "st-a", summary("y", {{"a", 0.5}}, {}), "st-a"),
               UsageError);
}
