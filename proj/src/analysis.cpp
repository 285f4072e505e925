// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>

#include "adafuse/error.hpp"
#include "adafuse/parallel.hpp"

namespace adafuse {

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// Round-trip form for CSV values.
std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename T, typename F>
std::vector<T> parse_list(JsonReader& r, const std::string& key, std::vector<T> fallback, F parse) {
  if (!r.has(key)) return fallback;
  const Json& arr = r.raw(key);
  if (!arr.is_array() || arr.empty()) throw ConfigError(r.field(key) + ": expected a non-empty array");
  std::vector<T> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    try {
      out.push_back(parse(arr[i]));
    } catch (const ConfigError& e) {
      throw ConfigError(r.field(key) + "[" + std::to_string(i) + "]: " + e.what());
    } catch (const Json::exception&) {
      throw ConfigError(r.field(key) + "[" + std::to_string(i) + "]: wrong type");
    }
  }
  return out;
}

}  // namespace

// ---- grid axes ----

std::string to_string(PlacementAxis p) {
  switch (p) {
    case PlacementAxis::top: return "top";
    case PlacementAxis::bottom: return "bottom";
    case PlacementAxis::both: return "both";
  }
  return "?";
}

std::string to_string(PretrainedLnAxis p) {
  switch (p) {
    case PretrainedLnAxis::before: return "before";
    case PretrainedLnAxis::after: return "after";
    case PretrainedLnAxis::before_and_after: return "before_and_after";
    case PretrainedLnAxis::none: return "none";
  }
  return "?";
}

PlacementAxis parse_placement_axis(const std::string& text) {
  for (auto p : {PlacementAxis::top, PlacementAxis::bottom, PlacementAxis::both}) {
    if (to_string(p) == text) return p;
  }
  throw ConfigError("unknown placement '" + text + "'");
}

PretrainedLnAxis parse_pretrained_ln_axis(const std::string& text) {
  for (auto p : {PretrainedLnAxis::before, PretrainedLnAxis::after,
                 PretrainedLnAxis::before_and_after, PretrainedLnAxis::none}) {
    if (to_string(p) == text) return p;
  }
  throw ConfigError("unknown pretrained_ln '" + text + "'");
}

std::string grid_label(NewLnPosition p) {
  switch (p) {
    case NewLnPosition::none: return "none";
    case NewLnPosition::before_adapter: return "before";
    case NewLnPosition::after_adapter: return "after";
    case NewLnPosition::inside: return "inside";
  }
  return "?";
}

NewLnPosition parse_grid_new_ln(const std::string& text) {
  for (auto p : {NewLnPosition::none, NewLnPosition::before_adapter, NewLnPosition::after_adapter,
                 NewLnPosition::inside}) {
    if (grid_label(p) == text) return p;
  }
  return parse_new_ln(text);
}

AdapterConfig GridCell::adapter_config() const {
  AdapterConfig c;
  c.place_top = placement != PlacementAxis::bottom;
  c.place_bottom = placement != PlacementAxis::top;
  c.ln_before = pretrained_ln == PretrainedLnAxis::before ||
                pretrained_ln == PretrainedLnAxis::before_and_after;
  c.ln_after = pretrained_ln == PretrainedLnAxis::after ||
               pretrained_ln == PretrainedLnAxis::before_and_after;
  c.new_ln = new_ln;
  c.reduction_factor = reduction_factor;
  c.nonlinearity = ad::Nonlinearity{nonlinearity};
  c.retag();
  return c;
}

std::string GridCell::label() const {
  return to_string(placement) + "/" + to_string(pretrained_ln) + "/" + grid_label(new_ln) + "/r" +
         std::to_string(reduction_factor) + "/" + ad::to_string(nonlinearity);
}

std::size_t GridSpec::cell_count() const {
  return placements.size() * pretrained_ln.size() * new_ln.size() * reduction_factors.size() *
         nonlinearities.size();
}

std::vector<GridCell> GridSpec::cells() const {
  std::vector<GridCell> out;
  for (auto p : placements)
    for (auto ln : pretrained_ln)
      for (auto nl : new_ln)
        for (auto r : reduction_factors)
          for (auto act : nonlinearities) {
            GridCell c{out.size(), p, ln, nl, r, act};
            out.push_back(c);
          }
  return out;
}

Json GridSpec::to_json() const {
  Json j;
  for (auto p : placements) j["placement"].push_back(to_string(p));
  for (auto p : pretrained_ln) j["pretrained_ln"].push_back(to_string(p));
  for (auto p : new_ln) j["new_ln"].push_back(grid_label(p));
  j["reduction_factor"] = reduction_factors;
  for (auto a : nonlinearities) j["nonlinearity"].push_back(ad::to_string(a));
  j["probe_tasks"] = probe_tasks;
  j["max_cells"] = max_cells;
  return j;
}

GridSpec GridSpec::from_json(const Json& j, const std::string& path) {
  JsonReader r(j, path);
  GridSpec g;
  auto str = [](const Json& v) { return v.get<std::string>(); };
  g.placements = parse_list(r, "placement", g.placements,
                            [&](const Json& v) { return parse_placement_axis(str(v)); });
  g.pretrained_ln = parse_list(r, "pretrained_ln", g.pretrained_ln,
                               [&](const Json& v) { return parse_pretrained_ln_axis(str(v)); });
  g.new_ln = parse_list(r, "new_ln", g.new_ln, [&](const Json& v) { return parse_grid_new_ln(str(v)); });
  g.reduction_factors = parse_list(r, "reduction_factor", g.reduction_factors, [](const Json& v) {
    const auto x = v.get<std::size_t>();
    if (x == 0) throw ConfigError("reduction factor must be positive");
    return x;
  });
  g.nonlinearities = parse_list(r, "nonlinearity", g.nonlinearities,
                                [&](const Json& v) { return ad::parse_activation(str(v)); });
  g.probe_tasks = r.get("probe_tasks", g.probe_tasks);
  g.max_cells = r.get("max_cells", g.max_cells);
  r.finish();
  return g;
}

std::optional<AdapterConfig> as_pfeiffer(const GridCell& cell) {
  AdapterConfig preset = AdapterConfig::pfeiffer(cell.reduction_factor);
  preset.nonlinearity = ad::Nonlinearity{cell.nonlinearity};
  if (cell.adapter_config().to_json() != preset.to_json()) return std::nullopt;
  return preset;
}

// ---- grid search ----

std::vector<const GridCellResult*> GridResult::ranked() const {
  std::vector<const GridCellResult*> out;
  for (const auto& c : cells) out.push_back(&c);
  std::stable_sort(out.begin(), out.end(), [](const GridCellResult* a, const GridCellResult* b) {
    if (a->mean_rank != b->mean_rank) return a->mean_rank < b->mean_rank;
    return a->mean_dev_accuracy > b->mean_dev_accuracy;
  });
  return out;
}

std::string GridResult::csv() const {
  std::ostringstream os;
  os << "rank,cell,placement,pretrained_ln,new_ln,reduction_factor,nonlinearity";
  for (const auto& t : probe_tasks) os << "," << t;
  os << ",mean_dev_accuracy,mean_rank,best\n";
  std::size_t pos = 0;
  for (const auto* c : ranked()) {
    const auto& g = c->cell;
    os << ++pos << "," << g.index << "," << to_string(g.placement) << "," << to_string(g.pretrained_ln)
       << "," << grid_label(g.new_ln) << "," << g.reduction_factor << "," << ad::to_string(g.nonlinearity);
    for (const auto& t : probe_tasks) os << "," << exact(c->task_dev_accuracy.at(t));
    os << "," << exact(c->mean_dev_accuracy) << "," << exact(c->mean_rank) << ","
       << (c->best ? "yes" : "no") << "\n";
  }
  return os.str();
}

Json GridResult::to_json() const {
  Json cj = Json::array();
  for (const auto& c : cells) {
    cj.push_back(Json{{"index", c.cell.index},
                      {"label", c.cell.label()},
                      {"adapter", c.cell.adapter_config().to_json()},
                      {"task_dev_accuracy", c.task_dev_accuracy},
                      {"mean_dev_accuracy", c.mean_dev_accuracy},
                      {"mean_rank", c.mean_rank},
                      {"best", c.best}});
  }
  Json mj = Json::array();
  for (const auto& m : marginals) {
    Json rows = Json::array();
    for (const auto& r : m.rows) {
      rows.push_back(Json{{"key", r.key}, {"mean_dev_accuracy", r.mean_dev_accuracy}, {"cells", r.cells}});
    }
    mj.push_back(Json{{"axes", m.axes}, {"rows", rows}});
  }
  Json j{{"probe_tasks", probe_tasks}, {"cells", cj}, {"best_index", best_index}, {"marginals", mj}};
  if (auto p = as_pfeiffer(cells.at(best_index).cell)) j["best_as_preset"] = p->to_json();
  return j;
}

GridResult rank_grid(const std::vector<GridCell>& cells, const std::vector<std::string>& tasks,
                     const std::vector<std::map<std::string, double>>& accuracy) {
  if (cells.empty()) throw UsageError("grid has no cells");
  if (accuracy.size() != cells.size()) throw UsageError("one accuracy map per cell expected");
  GridResult res;
  res.probe_tasks = tasks;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    GridCellResult c;
    c.cell = cells[i];
    c.task_dev_accuracy = accuracy[i];
    double sum = 0.0;
    for (const auto& t : tasks) sum += accuracy[i].at(t);
    c.mean_dev_accuracy = sum / static_cast<double>(tasks.size());
    res.cells.push_back(c);
  }
  // Per-task ranks; ties share the average of the positions they occupy.
  for (const auto& t : tasks) {
    std::vector<std::size_t> order(cells.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return accuracy[a].at(t) > accuracy[b].at(t);
    });
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j < order.size() && accuracy[order[j]].at(t) == accuracy[order[i]].at(t)) ++j;
      const double rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
      for (std::size_t k = i; k < j; ++k) res.cells[order[k]].mean_rank += rank;
      i = j;
    }
  }
  for (auto& c : res.cells) c.mean_rank /= static_cast<double>(tasks.size());
  res.best_index = res.ranked().front()->cell.index;
  for (auto& c : res.cells) c.best = c.cell.index == res.best_index;

  // Marginals from coarse to fine over the wiring axes, then the size and
  // nonlinearity axes on their own.
  using KeyFn = std::function<std::vector<std::string>(const GridCell&)>;
  const std::vector<std::pair<std::vector<std::string>, KeyFn>> levels = {
      {{"placement"}, [](const GridCell& g) { return std::vector<std::string>{to_string(g.placement)}; }},
      {{"placement", "pretrained_ln"},
       [](const GridCell& g) {
         return std::vector<std::string>{to_string(g.placement), to_string(g.pretrained_ln)};
       }},
      {{"placement", "pretrained_ln", "new_ln"},
       [](const GridCell& g) {
         return std::vector<std::string>{to_string(g.placement), to_string(g.pretrained_ln),
                                         grid_label(g.new_ln)};
       }},
      {{"reduction_factor"},
       [](const GridCell& g) { return std::vector<std::string>{std::to_string(g.reduction_factor)}; }},
      {{"nonlinearity"},
       [](const GridCell& g) { return std::vector<std::string>{ad::to_string(g.nonlinearity)}; }},
  };
  for (const auto& [axes, key] : levels) {
    MarginalTable table;
    table.axes = axes;
    std::vector<std::vector<std::string>> keys;
    std::vector<std::pair<double, std::size_t>> acc;
    for (const auto& c : res.cells) {
      auto k = key(c.cell);
      auto it = std::find(keys.begin(), keys.end(), k);
      if (it == keys.end()) {
        keys.push_back(k);
        acc.push_back({0.0, 0});
        it = keys.end() - 1;
      }
      auto& slot = acc[static_cast<std::size_t>(it - keys.begin())];
      slot.first += c.mean_dev_accuracy;
      ++slot.second;
    }
    for (std::size_t i = 0; i < keys.size(); ++i) {
      table.rows.push_back({keys[i], acc[i].first / static_cast<double>(acc[i].second), acc[i].second});
    }
    res.marginals.push_back(std::move(table));
  }
  return res;
}

GridResult grid_search(const BackboneParams& theta, const Suite& suite, const GridSpec& grid,
                       const TrainConfig& train, const std::vector<std::uint64_t>& seeds,
                       std::size_t workers) {
  const std::size_t count = grid.cell_count();
  if (count > grid.max_cells) {
    throw BudgetError("grid has " + std::to_string(count) + " cells, budget allows " +
                      std::to_string(grid.max_cells));
  }
  if (count == 0) throw ConfigError("$.grid: every axis needs at least one value");
  if (seeds.empty()) throw ConfigError("grid search needs at least one seed");
  std::vector<std::string> tasks = grid.probe_tasks;
  if (tasks.empty()) {
    for (std::size_t i = 0; i < std::min<std::size_t>(3, suite.tasks.size()); ++i) {
      tasks.push_back(suite.tasks[i].spec.name);
    }
  }
  for (const auto& t : tasks) suite.task(t);
  const auto cells = grid.cells();
  for (const auto& c : cells) {
    try {
      c.adapter_config().validate(theta.config.hidden_dim);
    } catch (const ConfigError& e) {
      throw ConfigError("$.grid cell " + c.label() + ": " + e.what());
    }
  }
  const std::size_t per_cell = tasks.size() * seeds.size();
  std::vector<double> dev(cells.size() * per_cell);
  parallel_for(dev.size(), workers, [&](std::size_t i) {
    const std::size_t cell = i / per_cell;
    const std::size_t task = (i % per_cell) / seeds.size();
    TrainConfig cfg = train;
    cfg.seed = seeds[i % seeds.size()];
    const auto& data = suite.task(tasks[task]);
    dev[i] = train_st_adapter(theta, data, cells[cell].adapter_config(), cfg)
                 .record.dev_accuracy.at(data.spec.name);
  });
  std::vector<std::map<std::string, double>> accuracy(cells.size());
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      double sum = 0.0;
      for (std::size_t s = 0; s < seeds.size(); ++s) sum += dev[c * per_cell + t * seeds.size() + s];
      accuracy[c][tasks[t]] = sum / static_cast<double>(seeds.size());
    }
  }
  return rank_grid(cells, tasks, accuracy);
}

// ---- heatmap ----

std::vector<std::size_t> default_heatmap_layers(std::size_t num_layers) {
  if (num_layers == 0) throw UsageError("no layers to select");
  auto ceil_frac = [&](std::size_t num) { return (num_layers * num + 11) / 12; };
  std::vector<std::size_t> out;
  for (std::size_t l : {std::size_t{1}, ceil_frac(7), ceil_frac(9), num_layers}) {
    if (std::find(out.begin(), out.end(), l) == out.end()) out.push_back(l);
  }
  return out;
}

std::vector<HeatmapRow> heatmap_rows(std::span<const FusionActivationTrace> traces,
                                     const std::vector<std::size_t>& layers) {
  if (traces.empty()) throw UsageError("no activation traces given");
  const auto& members = traces.front().members;
  for (const auto& t : traces) {
    if (t.members != members) {
      throw UsageError("trace for '" + t.target + "' has a different member list than '" +
                       traces.front().target + "'");
    }
  }
  std::vector<HeatmapRow> rows;
  for (std::size_t layer : layers) {
    for (const auto& t : traces) {
      if (layer == 0 || layer > t.layers.size()) {
        throw UsageError("layer " + std::to_string(layer) + " is outside the trace of '" + t.target +
                         "' (" + std::to_string(t.layers.size()) + " layers)");
      }
      const auto& means = t.layers[layer - 1];
      if (means.empty()) continue;
      for (std::size_t n = 0; n < members.size(); ++n) {
        rows.push_back({layer, t.target, members[n], means[n]});
      }
    }
  }
  return rows;
}

std::string heatmap_csv(const std::vector<HeatmapRow>& rows) {
  std::ostringstream os;
  os << "layer,target_task,adapter,mean_activation\n";
  for (const auto& r : rows) {
    os << r.layer << "," << r.target << "," << r.adapter << "," << exact(r.mean_activation) << "\n";
  }
  return os.str();
}

// ---- summaries ----

Stats make_stats(std::vector<double> values) {
  Stats s;
  s.values = std::move(values);
  if (s.values.empty()) return s;
  const double n = static_cast<double>(s.values.size());
  s.mean = std::accumulate(s.values.begin(), s.values.end(), 0.0) / n;
  if (s.values.size() > 1) {
    double sq = 0.0;
    for (double v : s.values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / (n - 1.0));
  }
  return s;
}

const std::vector<std::pair<std::string, std::string>>& summary_columns() {
  static const std::vector<std::pair<std::string, std::string>> cols = {
      {"head", "Head"},
      {"full", "Full"},
      {"st-a", "ST-A"},
      {"mt-a", "MT-A"},
      {"fusion-st-a", "Fusion w/ ST-A"},
      {"fusion-mt-a", "Fusion w/ MT-A"},
      {"sequential", "Sequential"},
  };
  return cols;
}

std::string RunSummary::markdown() const {
  std::vector<std::pair<std::string, std::string>> cols;
  for (const auto& c : summary_columns()) {
    if (modes.contains(c.first)) cols.push_back(c);
  }
  std::ostringstream os;
  os << "| Task |";
  for (const auto& c : cols) os << " " << c.second << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < cols.size(); ++i) os << "---|";
  os << "\n";
  for (const auto& task : tasks) {
    os << "| " << task << " |";
    for (const auto& c : cols) {
      const auto& per_task = modes.at(c.first);
      auto it = per_task.find(task);
      if (it == per_task.end()) {
        os << " - |";
      } else {
        os << " " << fixed(100.0 * it->second.mean, 2) << " ± " << fixed(100.0 * it->second.std, 2) << " |";
      }
    }
    os << "\n";
  }
  return os.str();
}

Json RunSummary::to_json() const {
  Json m = Json::object();
  for (const auto& [mode, per_task] : modes) {
    for (const auto& [task, s] : per_task) {
      m[mode][task] = Json{{"values", s.values}, {"mean", s.mean}, {"std", s.std}};
    }
  }
  return Json{{"suite_fingerprint", suite_fingerprint}, {"seeds", seeds}, {"tasks", tasks}, {"modes", m}};
}

RunSummary RunSummary::from_json(const Json& j) {
  RunSummary s;
  try {
    s.suite_fingerprint = j.at("suite_fingerprint").get<std::string>();
    s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    s.tasks = j.at("tasks").get<std::vector<std::string>>();
    for (const auto& [mode, per_task] : j.at("modes").items()) {
      for (const auto& [task, st] : per_task.items()) {
        s.modes[mode][task] = make_stats(st.at("values").get<std::vector<double>>());
      }
    }
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed run summary: ") + e.what());
  }
  return s;
}

std::string to_string(Trend t) {
  switch (t) {
    case Trend::improvement: return "improvement";
    case Trend::same: return "same";
    case Trend::decrease: return "decrease";
    case Trend::absent: return "absent";
  }
  return "?";
}

Trend classify_delta(double delta_points) {
  if (delta_points > 0.3) return Trend::improvement;
  if (delta_points < -0.3) return Trend::decrease;
  return Trend::same;
}

namespace {

std::string arrow(Trend t) {
  switch (t) {
    case Trend::improvement: return "↗";
    case Trend::decrease: return "↘";
    case Trend::same: return "→";
    case Trend::absent: return "absent";
  }
  return "?";
}

}  // namespace

bool CompareReport::complete() const {
  return std::none_of(rows.begin(), rows.end(), [](const CompareRow& r) { return r.trend == Trend::absent; });
}

std::string CompareReport::markdown() const {
  std::ostringstream os;
  os << "| Task | " << base_mode << " | " << other_mode << " | Δ | |\n|---|---|---|---|---|\n";
  auto cell = [](const std::optional<double>& v) { return v ? fixed(*v, 2) : std::string("-"); };
  for (const auto& r : rows) {
    os << "| " << r.task << " | " << cell(r.base) << " | " << cell(r.other) << " | "
       << (r.trend == Trend::absent ? std::string("-") : fixed(r.delta, 2)) << " | " << arrow(r.trend)
       << " |\n";
  }
  return os.str();
}

std::string CompareReport::csv() const {
  std::ostringstream os;
  os << "task,base,other,delta,trend\n";
  for (const auto& r : rows) {
    os << r.task << "," << (r.base ? exact(*r.base) : "") << "," << (r.other ? exact(*r.other) : "") << ","
       << (r.trend == Trend::absent ? "" : exact(r.delta)) << "," << to_string(r.trend) << "\n";
  }
  return os.str();
}

CompareReport compare_runs(const RunSummary& base, const std::string& base_mode,
                           const RunSummary& other, const std::string& other_mode) {
  if (base.suite_fingerprint != other.suite_fingerprint) {
    throw UsageError("runs use different task suites (" + base.suite_fingerprint + " vs " +
                     other.suite_fingerprint + ")");
  }
  CompareReport rep;
  rep.base_mode = base_mode;
  rep.other_mode = other_mode;
  std::vector<std::string> tasks = base.tasks;
  for (const auto& t : other.tasks) {
    if (std::find(tasks.begin(), tasks.end(), t) == tasks.end()) tasks.push_back(t);
  }
  auto lookup = [](const RunSummary& s, const std::string& mode, const std::string& task) {
    std::optional<double> v;
    auto m = s.modes.find(mode);
    if (m == s.modes.end()) return v;
    auto t = m->second.find(task);
    if (t != m->second.end()) v = 100.0 * t->second.mean;
    return v;
  };
  for (const auto& t : tasks) {
    CompareRow r;
    r.task = t;
    r.base = lookup(base, base_mode, t);
    r.other = lookup(other, other_mode, t);
    if (r.base && r.other) {
      r.delta = *r.other - *r.base;
      r.trend = classify_delta(r.delta);
    }
    rep.rows.push_back(r);
  }
  return rep;
}

}  // namespace adafuse
