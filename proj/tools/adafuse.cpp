// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line entry point. Every subcommand reads the experiment config
// (--config, or the built-in defaults), regenerates the task suite from it and
// writes its artifacts below --out.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>

#include "adafuse/analysis.hpp"
#include "adafuse/checks.hpp"
#include "adafuse/error.hpp"
#include "adafuse/experiment.hpp"

using namespace adafuse;
namespace fs = std::filesystem;

namespace {

struct GlobalOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::size_t workers = 0;
};

ExperimentConfig load_config(const GlobalOptions& g) {
  if (g.config.empty()) {
    ExperimentConfig c;
    c.validate();
    return c;
  }
  return ExperimentConfig::load(g.config);
}

fs::path out_dir(const GlobalOptions& g, const ExperimentConfig& c) {
  if (!g.out.empty()) return g.out;
  if (!c.out.empty()) return c.out;
  throw ConfigError("$.out: no output directory (pass --out or set \"out\" in the config)");
}

std::uint64_t run_seed(const GlobalOptions& g, const ExperimentConfig& c) {
  return g.seed ? *g.seed : c.seeds.front();
}

std::size_t workers(const GlobalOptions& g, const ExperimentConfig& c) {
  return g.workers > 0 ? g.workers : c.workers;
}

// Refuses to replace existing outputs unless --force is given.
void guard_outputs(const std::vector<fs::path>& paths, bool force) {
  if (force) return;
  for (const auto& p : paths) {
    if (fs::exists(p)) throw ArtifactError(p.string() + ": already exists (use --force)");
  }
}

BackboneParams backbone_from(const std::string& arg, const fs::path& out, const ExperimentConfig& c) {
  const fs::path p = arg.empty() ? out / "backbone.ckpt" : fs::path(arg);
  if (!fs::exists(p)) throw ArtifactError(p.string() + ": backbone checkpoint not found (run pretrain first)");
  return load_backbone(p, &c.backbone).params;
}

std::vector<std::string> split_names(const std::vector<std::string>& given, const ExperimentConfig& c) {
  return given.empty() ? c.run_tasks() : given;
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

Json meta(const std::string& mode, std::uint64_t seed, const std::string& task) {
  return Json{{"mode", mode}, {"seed", seed}, {"task", task}};
}

void print_result(const RunRecord& r) {
  for (const auto& [task, acc] : r.dev_accuracy) {
    std::printf("%s %s: dev %.4f test %.4f (best epoch %zu, %.1fs)\n", r.mode.c_str(), task.c_str(), acc,
                r.test_accuracy.at(task), r.best_epoch, r.wall_time_s);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adafuse: adapters and adapter fusion on a toy transformer encoder"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--seed", g.seed, "Run seed (overrides the config's seed set)");
  app.add_flag("--force", g.force, "Overwrite existing outputs");
  app.add_option("--workers", g.workers, "Parallel training runs")->check(CLI::PositiveNumber);

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "Masked-token pretraining of the backbone");
  pretrain->callback([&] {
    const auto cfg = load_config(g);
    const fs::path out = out_dir(g, cfg);
    guard_outputs({out / "backbone.ckpt"}, g.force);
    const Suite suite = generate_suite(cfg.suite, cfg.seed);
    PreparedBackbone b = prepare_backbone(cfg, suite);
    save_backbone(out / "backbone.ckpt", b.params, b.mlm_bias.defined() ? &b.mlm_bias : nullptr, b.metadata);
    Json report = b.metadata;
    if (b.mlm_bias.defined()) {
      report["masked_token_accuracy"] =
          masked_token_accuracy(b.params, b.mlm_bias, suite.corpus, cfg.pretrain->mask_rate, cfg.seed);
    }
    write_file_atomic(out / "pretrain.json", dump(report));
    std::cout << report.dump() << "\n";
  });

  // gen-tasks
  auto* gen = app.add_subcommand("gen-tasks", "Generate the task suite and export it");
  gen->callback([&] {
    const auto cfg = load_config(g);
    const fs::path out = out_dir(g, cfg);
    guard_outputs({out / "suite.json"}, g.force);
    const Suite suite = generate_suite(cfg.suite, cfg.seed);
    for (const auto& t : suite.tasks) {
      const fs::path dir = out / "tasks" / t.spec.name;
      fs::create_directories(dir);
      export_ldjson(t.train, dir / "train.ldjson");
      export_ldjson(t.dev, dir / "dev.ldjson");
      export_ldjson(t.test, dir / "test.ldjson");
      std::printf("%s: %s, %zu classes, train %zu dev %zu test %zu\n", t.spec.name.c_str(),
                  to_string(t.semantics).c_str(), t.num_classes, t.train.size(), t.dev.size(), t.test.size());
    }
    Json j = cfg.suite.to_json();
    j["fingerprint"] = suite_fingerprint(cfg.suite, cfg.seed);
    write_file_atomic(out / "suite.json", dump(j));
  });

  // train-adapter
  std::string task_name, backbone_path;
  auto* st = app.add_subcommand("train-adapter", "Train a single-task adapter (ST-A)");
  st->add_option("--task", task_name, "Task name")->required();
  st->add_option("--backbone", backbone_path, "Backbone checkpoint (default: <out>/backbone.ckpt)");
  st->callback([&] {
    const auto cfg = load_config(g);
    const fs::path out = out_dir(g, cfg);
    const fs::path dir = out / "st-a" / task_name;
    guard_outputs({dir / "record.json"}, g.force);
    const Suite suite = generate_suite(cfg.suite, cfg.seed);
    const auto& task = suite.task(task_name);
    const BackboneParams theta = backbone_from(backbone_path, out, cfg);
    TrainConfig tc = cfg.train_adapter;
    tc.seed = run_seed(g, cfg);
    auto r = train_st_adapter(theta, task, cfg.adapter, tc);
    serialize_adapter(r.adapter, meta("st-a", tc.seed, task_name), dir / "adapter.ckpt");
    save_head(r.head, theta.config.fingerprint(), meta("st-a", tc.seed, task_name), dir / "head.ckpt");
    write_file_atomic(dir / "record.json", dump(r.record.to_json()));
    print_result(r.record);
  });

  // train-mta
  std::vector<std::string> task_list;
  auto* mta = app.add_subcommand("train-mta", "Train multi-task adapters with the backbone (MT-A)");
  mta->add_option("--tasks", task_list, "Task names (default: the config's tasks)")->delimiter(',');
  mta->add_option("--backbone", backbone_path, "Backbone checkpoint (default: <out>/backbone.ckpt)");
  mta->callback([&] {
    const auto cfg = load_config(g);
    const fs::path out = out_dir(g, cfg);
    const fs::path dir = out / "mt-a";
    guard_outputs({dir / "record.json"}, g.force);
    const Suite suite = generate_suite(cfg.suite, cfg.seed);
    std::vector<const TaskDataset*> tasks;
    for (const auto& n : split_names(task_list, cfg)) tasks.push_back(&suite.task(n));
    const BackboneParams theta = backbone_from(backbone_path, out, cfg);
    TrainConfig tc = cfg.train_mt;
    tc.seed = run_seed(g, cfg);
    auto r = train_mt_adapters(theta, tasks, cfg.adapter, tc);
    save_backbone(dir / "backbone.ckpt", r.theta, nullptr, meta("mt-a", tc.seed, ""));
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const auto& n = tasks[i]->spec.name;
      serialize_adapter(r.adapters[i], meta("mt-a", tc.seed, n), dir / "adapters" / (n + ".ckpt"));
      save_head(r.heads[i], theta.config.fingerprint(), meta("mt-a", tc.seed, n), dir / "heads" / (n + ".ckpt"));
    }
    write_file_atomic(dir / "record.json", dump(r.record.to_json()));
    print_result(r.record);
  });

  // train-fusion
  std::string target;
  std::vector<std::string> adapter_paths;
  std::string head_path;
  auto* fus = app.add_subcommand("train-fusion", "Train AdapterFusion over frozen adapters");
  fus->add_option("--target", target, "Target task")->required();
  fus->add_option("--adapters", adapter_paths, "Member adapter checkpoints, in order")->required();
  fus->add_option("--backbone", backbone_path, "Backbone checkpoint (default: <out>/backbone.ckpt)");
  fus->add_option("--head", head_path, "Stage-1 head to reuse (with train.fusion.reuse_head)");
  fus->callback([&] {
    const auto cfg = load_config(g);
    const fs::path out = out_dir(g, cfg);
    const fs::path dir = out / "fusion" / target;
    guard_outputs({dir / "record.json"}, g.force);
    const Suite suite = generate_suite(cfg.suite, cfg.seed);
    const auto& task = suite.task(target);
    const BackboneParams theta = backbone_from(backbone_path, out, cfg);
    std::vector<AdapterParams> members;
    for (const auto& p : adapter_paths) {
      if (!fs::exists(p)) throw ArtifactError(p + ": adapter checkpoint not found");
      members.push_back(deserialize_adapter(p, theta.config));
    }
    std::optional<ClassifierHead> head;
    if (!head_path.empty()) {
      if (!fs::exists(head_path)) throw ArtifactError(head_path + ": head checkpoint not found");
      head = load_head(head_path, theta.config);
    }
    TrainConfig tc = cfg.train_fusion;
    tc.seed = run_seed(g, cfg);
    auto r = train_fusion(theta, members, task, tc, cfg.fusion, head ? &*head : nullptr);
    serialize_fusion(r.psi, meta("fusion", tc.seed, target), dir / "fusion.ckpt");
    save_head(r.head, theta.config.fingerprint(), meta("fusion", tc.seed, target), dir / "head.ckpt");
    write_file_atomic(dir / "trace.json", dump(r.trace.to_json()));
    write_file_atomic(dir / "record.json", dump(r.record.to_json()));
    print_result(r.record);
  });

  // train-baseline
  std::string baseline_mode = "head_only";
  auto* base = app.add_subcommand("train-baseline", "Head-only, full or sequential fine-tuning");
  base->add_option("--mode", baseline_mode, "head_only | full | sequential");
  base->add_option("--tasks", task_list, "Task names; one for head_only/full")->delimiter(',');
  base->add_option("--backbone", backbone_path, "Backbone checkpoint (default: <out>/backbone.ckpt)");
  base->callback([&] {
    const auto cfg = load_config(g);
    const BaselineMode mode = parse_baseline_mode(baseline_mode);
    const fs::path out = out_dir(g, cfg);
    const Suite suite = generate_suite(cfg.suite, cfg.seed);
    auto names = split_names(task_list, cfg);
    if (mode != BaselineMode::sequential && task_list.empty()) names.resize(1);
    std::vector<const TaskDataset*> tasks;
    for (const auto& n : names) tasks.push_back(&suite.task(n));
    const fs::path dir = out / baseline_mode / (mode == BaselineMode::sequential ? "" : names.front());
    guard_outputs({dir / "record.json"}, g.force);
    const BackboneParams theta = backbone_from(backbone_path, out, cfg);
    TrainConfig tc = cfg.train_baseline;
    tc.seed = run_seed(g, cfg);
    auto r = train_baseline(theta, tasks, mode, tc);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      save_head(r.heads[i], theta.config.fingerprint(), meta(baseline_mode, tc.seed, names[i]),
                dir / "heads" / (names[i] + ".ckpt"));
    }
    if (mode != BaselineMode::head_only) save_backbone(dir / "backbone.ckpt", r.theta, nullptr, meta(baseline_mode, tc.seed, ""));
    write_file_atomic(dir / "record.json", dump(r.record.to_json()));
    print_result(r.record);
    for (std::size_t s = 0; s < r.record.stage_dev_accuracy.size(); ++s) {
      std::printf("after stage %zu:", s + 1);
      for (const auto& [t, a] : r.record.stage_dev_accuracy[s]) std::printf(" %s=%.4f", t.c_str(), a);
      std::printf("\n");
    }
  });

  // eval
  std::string split_name = "dev", adapter_path, fusion_path;
  auto* ev = app.add_subcommand("eval", "Evaluate a stored model on a split");
  ev->add_option("--task", task_name, "Task name")->required();
  ev->add_option("--split", split_name, "dev | test")->check(CLI::IsMember({"dev", "test"}));
  ev->add_option("--backbone", backbone_path, "Backbone checkpoint (default: <out>/backbone.ckpt)");
  ev->add_option("--head", head_path, "Head checkpoint")->required();
  ev->add_option("--adapter", adapter_path, "Adapter checkpoint");
  ev->add_option("--fusion", fusion_path, "Fusion checkpoint (needs --adapters)");
  ev->add_option("--adapters", adapter_paths, "Fusion member adapters, in order");
  ev->callback([&] {
    const auto cfg = load_config(g);
    const fs::path out = g.out.empty() && cfg.out.empty() ? fs::path(".") : out_dir(g, cfg);
    const Suite suite = generate_suite(cfg.suite, cfg.seed);
    const auto& task = suite.task(task_name);
    const BackboneParams theta = backbone_from(backbone_path, out, cfg);
    if (!fs::exists(head_path)) throw ArtifactError(head_path + ": head checkpoint not found");
    const ClassifierHead head = load_head(head_path, theta.config);
    HookSet hooks(theta.config.num_layers);
    std::optional<AdapterParams> phi;
    std::vector<AdapterParams> members;
    std::optional<FusionParams> psi;
    if (!fusion_path.empty()) {
      if (adapter_paths.empty()) throw UsageError("--fusion needs --adapters");
      for (const auto& p : adapter_paths) {
        if (!fs::exists(p)) throw ArtifactError(p + ": adapter checkpoint not found");
        members.push_back(deserialize_adapter(p, theta.config));
      }
      if (!fs::exists(fusion_path)) throw ArtifactError(fusion_path + ": fusion checkpoint not found");
      psi = deserialize_fusion(fusion_path, theta.config);
      install_fusion(hooks, *psi, members);
    } else if (!adapter_path.empty()) {
      if (!fs::exists(adapter_path)) throw ArtifactError(adapter_path + ": adapter checkpoint not found");
      phi = deserialize_adapter(adapter_path, theta.config);
      install_adapter(hooks, *phi);
    }
    const InstanceSet& split = split_name == "dev" ? static_cast<const InstanceSet&>(task.dev)
                                                   : static_cast<const InstanceSet&>(task.test);
    const EvalResult r = evaluate({&theta, &hooks, &head}, split);
    std::cout << Json{{"task", task_name}, {"split", split_name}, {"accuracy", r.accuracy},
                      {"correct", r.correct}, {"total", r.total}}.dump()
              << "\n";
  });

  // grid-search
  std::optional<std::size_t> max_cells;
  auto* grid = app.add_subcommand("grid-search", "Adapter architecture grid search");
  grid->add_option("--max-cells", max_cells, "Override the cell budget");
  grid->add_option("--backbone", backbone_path, "Backbone checkpoint (default: pretrain from the config)");
  grid->callback([&] {
    const auto cfg = load_config(g);
    GridSpec spec = cfg.grid;
    if (max_cells) spec.max_cells = *max_cells;
    if (spec.cell_count() > spec.max_cells) {
      throw BudgetError("grid has " + std::to_string(spec.cell_count()) + " cells, budget allows " +
                        std::to_string(spec.max_cells) + " (raise with --max-cells)");
    }
    const fs::path out = out_dir(g, cfg);
    const fs::path dir = out / "grid";
    guard_outputs({dir / "grid.json"}, g.force);
    const Suite suite = generate_suite(cfg.suite, cfg.seed);
    BackboneParams theta = backbone_path.empty() ? prepare_backbone(cfg, suite).params
                                                 : backbone_from(backbone_path, out, cfg);
    std::vector<std::uint64_t> seeds = g.seed ? std::vector<std::uint64_t>{*g.seed} : cfg.seeds;
    auto res = grid_search(theta, suite, spec, cfg.train_adapter, seeds, workers(g, cfg));
    write_file_atomic(dir / "grid.csv", res.csv());
    write_file_atomic(dir / "grid.json", dump(res.to_json()));
    for (std::size_t m = 0; m < res.marginals.size(); ++m) {
      std::ostringstream os;
      const auto& t = res.marginals[m];
      for (const auto& a : t.axes) os << a << ",";
      os << "mean_dev_accuracy,cells\n";
      for (const auto& r : t.rows) {
        for (const auto& k : r.key) os << k << ",";
        os << r.mean_dev_accuracy << "," << r.cells << "\n";
      }
      write_file_atomic(dir / ("marginal-" + std::to_string(m + 1) + ".csv"), os.str());
    }
    const auto& best = res.cells[res.best_index];
    std::printf("%zu cells; best %s (mean dev %.4f, mean rank %.2f)%s\n", res.cells.size(),
                best.cell.label().c_str(), best.mean_dev_accuracy, best.mean_rank,
                as_pfeiffer(best.cell) ? " = pfeiffer preset" : "");
  });

  // heatmap
  std::vector<std::string> trace_paths;
  std::vector<std::size_t> layers;
  auto* heat = app.add_subcommand("heatmap", "Export fusion activations as CSV");
  heat->add_option("--traces", trace_paths, "Activation trace files (trace.json)")->required();
  heat->add_option("--layers", layers, "1-based layers (default: 1, 7L/12, 9L/12, L)")->delimiter(',');
  heat->callback([&] {
    std::vector<FusionActivationTrace> traces;
    for (const auto& p : trace_paths) traces.push_back(FusionActivationTrace::from_json(read_json_file(p)));
    const auto sel = layers.empty() ? default_heatmap_layers(traces.front().layers.size()) : layers;
    const std::string csv = heatmap_csv(heatmap_rows(traces, sel));
    if (g.out.empty()) {
      std::cout << csv;
    } else {
      guard_outputs({fs::path(g.out) / "heatmap.csv"}, g.force);
      write_file_atomic(fs::path(g.out) / "heatmap.csv", csv);
    }
  });

  // compare
  std::string base_dir, other_dir, base_mode = "st-a", other_mode = "fusion-st-a";
  int compare_status = 0;
  auto* cmp = app.add_subcommand("compare", "Per-task deltas between two runs");
  cmp->add_option("--base", base_dir, "Baseline run directory")->required();
  cmp->add_option("--other", other_dir, "Compared run directory (default: --base)");
  cmp->add_option("--base-mode", base_mode, "Mode taken from the base run");
  cmp->add_option("--other-mode", other_mode, "Mode taken from the other run");
  cmp->callback([&] {
    const auto b = RunSummary::from_json(read_json_file(fs::path(base_dir) / "summary.json"));
    const auto o = RunSummary::from_json(
        read_json_file(fs::path(other_dir.empty() ? base_dir : other_dir) / "summary.json"));
    const auto rep = compare_runs(b, base_mode, o, other_mode);
    std::cout << rep.markdown();
    if (!g.out.empty()) {
      write_file_atomic(fs::path(g.out) / "compare.md", rep.markdown());
      write_file_atomic(fs::path(g.out) / "compare.csv", rep.csv());
    }
    if (!rep.complete()) {
      std::cerr << "error: some tasks are missing from one of the runs\n";
      compare_status = 3;
    }
  });

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the fused model");
  gc->callback([&] {
    const std::uint64_t seed = g.seed.value_or(1);
    bool ok = true;
    for (const auto& [label, wiring] : {std::pair{"pfeiffer", AdapterConfig::pfeiffer(2)},
                                        std::pair{"houlsby", AdapterConfig::houlsby(2)}}) {
      for (const auto& grp : check_fused_model_gradients(wiring, seed)) {
        std::printf("%-8s %-16s max rel err %.3e %s\n", label, grp.group.c_str(), grp.report.max_rel_error,
                    grp.report.passed ? "ok" : "FAILED");
        ok = ok && grp.report.passed;
      }
    }
    if (!ok) throw CheckError("gradient check failed");
  });

  // run
  auto* run = app.add_subcommand("run", "Run a whole experiment (pretrain, stage 1, stage 2, eval)");
  run->callback([&] {
    auto cfg = load_config(g);
    if (g.seed) cfg.seeds = {*g.seed};
    const auto summary = run_experiment(cfg, out_dir(g, cfg), g.force, workers(g, cfg), &std::cerr);
    std::cout << summary.markdown();
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return compare_status;
}
