// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "adafuse/error.hpp"
#include "adafuse/parallel.hpp"
#include "adafuse/rng.hpp"

namespace adafuse {

namespace fs = std::filesystem;

const std::vector<std::string>& known_modes() {
  static const std::vector<std::string> modes = {"head", "full", "sequential", "st-a",
                                                 "mt-a", "fusion-st-a", "fusion-mt-a"};
  return modes;
}

std::vector<std::string> expand_modes(const std::vector<std::string>& modes) {
  std::set<std::string> want(modes.begin(), modes.end());
  if (want.contains("fusion-st-a")) want.insert("st-a");
  if (want.contains("fusion-mt-a")) want.insert("mt-a");
  std::vector<std::string> out;
  for (const auto& m : known_modes()) {
    if (want.contains(m)) out.push_back(m);
  }
  return out;
}

// ---- config ----

std::vector<std::string> ExperimentConfig::run_tasks() const {
  if (!tasks.empty()) return tasks;
  std::vector<std::string> out;
  for (const auto& t : suite.tasks) out.push_back(t.name);
  return out;
}

std::vector<std::string> ExperimentConfig::members() const {
  return fusion_members.empty() ? run_tasks() : fusion_members;
}

void ExperimentConfig::validate() const {
  auto field = [](const std::string& path, const std::string& msg) { return ConfigError(path + ": " + msg); };
  try {
    backbone.validate();
  } catch (const ConfigError& e) {
    throw field("$.backbone", e.what());
  }
  suite.vocab.validate();
  if (seeds.empty()) throw field("$.seeds", "expected at least one seed");
  if (modes.empty()) throw field("$.modes", "expected at least one mode");
  for (std::size_t i = 0; i < modes.size(); ++i) {
    const auto& km = known_modes();
    if (std::find(km.begin(), km.end(), modes[i]) == km.end()) {
      throw field("$.modes[" + std::to_string(i) + "]", "unknown mode '" + modes[i] + "'");
    }
  }
  std::set<std::string> suite_names;
  for (const auto& t : suite.tasks) suite_names.insert(t.name);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (!suite_names.contains(tasks[i])) {
      throw field("$.tasks[" + std::to_string(i) + "]", "no task '" + tasks[i] + "' in the suite");
    }
  }
  const auto run = run_tasks();
  if (run.empty()) throw field("$.tasks", "no tasks to run");
  for (std::size_t i = 0; i < fusion_members.size(); ++i) {
    if (std::find(run.begin(), run.end(), fusion_members[i]) == run.end()) {
      throw field("$.fusion_members[" + std::to_string(i) + "]",
                  "'" + fusion_members[i] + "' is not one of the run's tasks");
    }
  }
  const auto expanded = expand_modes(modes);
  if (std::find(expanded.begin(), expanded.end(), "mt-a") != expanded.end() && run.size() < 2) {
    throw field("$.tasks", "mt-a needs at least 2 tasks");
  }
  if (suite.vocab.vocab_size > backbone.vocab_size) {
    throw field("$.suite.vocab.vocab_size", "suite vocabulary " + std::to_string(suite.vocab.vocab_size) +
                                                " exceeds the backbone's " + std::to_string(backbone.vocab_size));
  }
  if (suite.vocab.max_len > backbone.max_seq_len) {
    throw field("$.suite.vocab.max_len", "sequences of length " + std::to_string(suite.vocab.max_len) +
                                             " exceed backbone max_seq_len " +
                                             std::to_string(backbone.max_seq_len));
  }
  try {
    adapter.validate(backbone.hidden_dim);
  } catch (const ConfigError& e) {
    throw field("$.adapter", e.what());
  }
  if (workers == 0) throw field("$.workers", "must be >= 1");
}

Json ExperimentConfig::to_json() const {
  Json j{{"schema", kExperimentSchema},
         {"seed", seed},
         {"seeds", seeds},
         {"backbone", backbone.to_json()},
         {"suite", suite.to_json()},
         {"tasks", tasks},
         {"modes", modes},
         {"adapter", adapter.to_json()},
         {"fusion", fusion.to_json()},
         {"fusion_members", fusion_members},
         {"train", Json{{"adapter", train_adapter.to_json()},
                        {"mt", train_mt.to_json()},
                        {"fusion", train_fusion.to_json()},
                        {"baseline", train_baseline.to_json()}}},
         {"grid", grid.to_json()},
         {"workers", workers}};
  j["pretrain"] = pretrain ? pretrain->to_json() : Json(false);
  if (!out.empty()) j["out"] = out;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const Json& j) {
  JsonReader r(j, "$");
  const auto schema = r.require<std::string>("schema");
  if (schema != kExperimentSchema) {
    throw ConfigError("$.schema: unsupported schema '" + schema + "' (expected " + kExperimentSchema + ")");
  }
  ExperimentConfig c;
  c.seed = r.get("seed", c.seed);
  c.seeds = r.get("seeds", c.seeds);
  c.out = r.get("out", c.out);
  if (r.has("backbone")) c.backbone = BackboneConfig::from_json(r.raw("backbone"), "$.backbone");
  if (r.has("pretrain")) {
    const Json& p = r.raw("pretrain");
    if (p.is_boolean() || p.is_null()) {
      if (p.is_null() || !p.get<bool>()) c.pretrain.reset();
    } else {
      c.pretrain = PretrainConfig::from_json(p, "$.pretrain");
    }
  }
  if (r.has("suite")) c.suite = SuiteConfig::from_json(r.raw("suite"), "$.suite");
  c.tasks = r.get("tasks", c.tasks);
  c.modes = r.get("modes", c.modes);
  if (r.has("adapter")) c.adapter = AdapterConfig::from_json(r.raw("adapter"), "$.adapter");
  if (r.has("fusion")) c.fusion = FusionConfig::from_json(r.raw("fusion"), "$.fusion");
  c.fusion_members = r.get("fusion_members", c.fusion_members);
  if (r.has("train")) {
    JsonReader t(r.raw("train"), "$.train");
    if (t.has("adapter")) c.train_adapter = TrainConfig::from_json(t.raw("adapter"), "$.train.adapter", c.train_adapter);
    if (t.has("mt")) c.train_mt = TrainConfig::from_json(t.raw("mt"), "$.train.mt", c.train_mt);
    if (t.has("fusion")) c.train_fusion = TrainConfig::from_json(t.raw("fusion"), "$.train.fusion", c.train_fusion);
    if (t.has("baseline")) {
      c.train_baseline = TrainConfig::from_json(t.raw("baseline"), "$.train.baseline", c.train_baseline);
    }
    t.finish();
  }
  if (r.has("grid")) c.grid = GridSpec::from_json(r.raw("grid"), "$.grid");
  c.workers = r.get("workers", c.workers);
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ArtifactError(path.string() + ": config file not found");
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": not valid JSON: " + e.what());
  }
  return from_json(j);
}

std::string suite_fingerprint(const SuiteConfig& suite, std::uint64_t seed) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(suite.to_json().dump() + "#" + std::to_string(seed))));
  return buf;
}

// ---- files ----

void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ArtifactError(tmp.string() + ": cannot open for writing");
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw ArtifactError(tmp.string() + ": write failed");
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArtifactError(path.string() + ": cannot open");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Json read_json_file(const fs::path& path) {
  if (!fs::exists(path)) throw ArtifactError(path.string() + ": not found");
  try {
    return Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw FormatError(path.string() + ": not valid JSON: " + e.what());
  }
}

void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw ArtifactError(dir.string() + ": exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) throw ArtifactError(dir.string() + ": output directory is not empty (use --force)");
      for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
    }
  }
  fs::create_directories(dir);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const ArtifactError*>(&e) || dynamic_cast<const CompatibilityError*>(&e) ||
      dynamic_cast<const FormatError*>(&e)) {
    return 3;
  }
  if (dynamic_cast<const BudgetError*>(&e)) return 4;
  return 1;
}

// ---- pipeline ----

PreparedBackbone prepare_backbone(const ExperimentConfig& cfg, const Suite& suite) {
  PreparedBackbone b;
  if (cfg.pretrain) {
    PretrainConfig pc = *cfg.pretrain;
    PretrainResult r = pretrain_mlm(cfg.backbone, suite.corpus, pc);
    b.params = std::move(r.params);
    b.mlm_bias = r.mlm_bias;
    b.metadata = Json{{"pretrain", pc.to_json()}, {"final_loss", r.final_loss}};
  } else {
    b.params = BackboneParams::init(cfg.backbone, derive_seed(cfg.seed, "backbone-init"));
    b.metadata = Json{{"pretrain", false}};
  }
  return b;
}

namespace {

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

class Pipeline {
 public:
  Pipeline(const ExperimentConfig& cfg, const fs::path& out, std::size_t workers, std::ostream* log)
      : cfg_(cfg), out_(out), workers_(workers), log_(log) {}

  RunSummary run() {
    suite_ = generate_suite(cfg_.suite, cfg_.seed);
    write_file_atomic(out_ / "config.json", dump(cfg_.to_json()));
    write_file_atomic(out_ / "suite.json", dump(cfg_.suite.to_json()));
    for (const auto& name : cfg_.run_tasks()) tasks_.push_back(&suite_.task(name));
    for (const auto* t : tasks_) check_task_fits(cfg_.backbone, *t);

    say("pretraining backbone");
    PreparedBackbone b = prepare_backbone(cfg_, suite_);
    theta_ = std::move(b.params);
    save_backbone(out_ / "backbone.ckpt", theta_, b.mlm_bias.defined() ? &b.mlm_bias : nullptr, b.metadata);

    summary_.suite_fingerprint = suite_fingerprint(cfg_.suite, cfg_.seed);
    summary_.seeds = cfg_.seeds;
    for (const auto* t : tasks_) summary_.tasks.push_back(t->spec.name);
    std::map<std::string, std::map<std::string, std::vector<double>>> values;
    for (std::uint64_t seed : cfg_.seeds) {
      const fs::path dir = out_ / ("seed-" + std::to_string(seed));
      SeedState st;
      for (const auto& mode : expand_modes(cfg_.modes)) {
        say("seed " + std::to_string(seed) + ": " + mode);
        auto acc = run_mode(mode, seed, dir / mode, st);
        if (std::find(cfg_.modes.begin(), cfg_.modes.end(), mode) == cfg_.modes.end()) continue;
        for (const auto& [task, v] : acc) values[mode][task].push_back(v);
      }
    }
    for (const auto& [mode, per_task] : values) {
      for (const auto& [task, v] : per_task) summary_.modes[mode][task] = make_stats(v);
    }
    write_file_atomic(out_ / "summary.json", dump(summary_.to_json()));
    write_file_atomic(out_ / "summary.md", summary_.markdown());
    return summary_;
  }

 private:
  struct SeedState {
    std::vector<AdapterParams> st_adapters;  // run-task order
    std::vector<ClassifierHead> st_heads;
    std::optional<MtAdapterResult> mt;
  };

  void say(const std::string& msg) {
    if (log_) *log_ << "[run] " << msg << "\n" << std::flush;
  }

  TrainConfig seeded(TrainConfig c, std::uint64_t seed) const {
    c.seed = seed;
    return c;
  }

  void write_record(const fs::path& dir, const RunRecord& rec) {
    write_file_atomic(dir / "record.json", dump(rec.to_json()));
  }

  Json meta(const std::string& mode, std::uint64_t seed, const std::string& task) const {
    return Json{{"mode", mode}, {"seed", seed}, {"task", task}};
  }

  std::map<std::string, double> run_mode(const std::string& mode, std::uint64_t seed, const fs::path& dir,
                                         SeedState& st) {
    std::map<std::string, double> acc;
    const std::string fp = theta_.config.fingerprint();
    const std::size_t n = tasks_.size();
    if (mode == "head" || mode == "full") {
      const BaselineMode bm = mode == "head" ? BaselineMode::head_only : BaselineMode::full;
      std::vector<std::optional<BaselineResult>> res(n);
      parallel_for(n, workers_, [&](std::size_t i) {
        res[i] = train_baseline(theta_, {tasks_[i]}, bm, seeded(cfg_.train_baseline, seed));
      });
      for (std::size_t i = 0; i < n; ++i) {
        const auto& name = tasks_[i]->spec.name;
        write_record(dir / name, res[i]->record);
        save_head(res[i]->heads[0], fp, meta(mode, seed, name), dir / name / "head.ckpt");
        if (bm == BaselineMode::full) {
          save_backbone(dir / name / "backbone.ckpt", res[i]->theta, nullptr, meta(mode, seed, name));
        }
        acc[name] = res[i]->record.test_accuracy.at(name);
      }
    } else if (mode == "sequential") {
      auto res = train_baseline(theta_, tasks_, BaselineMode::sequential, seeded(cfg_.train_baseline, seed));
      write_record(dir, res.record);
      acc = res.record.test_accuracy;
    } else if (mode == "st-a") {
      std::vector<std::optional<StAdapterResult>> res(n);
      parallel_for(n, workers_, [&](std::size_t i) {
        res[i] = train_st_adapter(theta_, *tasks_[i], cfg_.adapter, seeded(cfg_.train_adapter, seed));
      });
      for (std::size_t i = 0; i < n; ++i) {
        const auto& name = tasks_[i]->spec.name;
        write_record(dir / name, res[i]->record);
        serialize_adapter(res[i]->adapter, meta(mode, seed, name), dir / name / "adapter.ckpt");
        save_head(res[i]->head, fp, meta(mode, seed, name), dir / name / "head.ckpt");
        acc[name] = res[i]->record.test_accuracy.at(name);
        st.st_adapters.push_back(std::move(res[i]->adapter));
        st.st_heads.push_back(std::move(res[i]->head));
      }
    } else if (mode == "mt-a") {
      st.mt = train_mt_adapters(theta_, tasks_, cfg_.adapter, seeded(cfg_.train_mt, seed));
      write_record(dir, st.mt->record);
      save_backbone(dir / "backbone.ckpt", st.mt->theta, nullptr, meta(mode, seed, ""));
      for (std::size_t i = 0; i < n; ++i) {
        const auto& name = tasks_[i]->spec.name;
        serialize_adapter(st.mt->adapters[i], meta(mode, seed, name), dir / "adapters" / (name + ".ckpt"));
        save_head(st.mt->heads[i], fp, meta(mode, seed, name), dir / "heads" / (name + ".ckpt"));
      }
      acc = st.mt->record.test_accuracy;
    } else {
      const bool on_st = mode == "fusion-st-a";
      const BackboneParams& theta = on_st ? theta_ : st.mt->theta;
      const auto& pool = on_st ? st.st_adapters : st.mt->adapters;
      std::vector<AdapterParams> members;
      for (const auto& m : cfg_.members()) {
        for (std::size_t i = 0; i < n; ++i) {
          if (tasks_[i]->spec.name == m) members.push_back(pool[i].clone());
        }
      }
      std::vector<std::optional<FusionResult>> res(n);
      parallel_for(n, workers_, [&](std::size_t i) {
        const ClassifierHead* stage1 = on_st ? &st.st_heads[i] : &st.mt->heads[i];
        res[i] = train_fusion(theta, members, *tasks_[i], seeded(cfg_.train_fusion, seed), cfg_.fusion, stage1);
      });
      std::vector<FusionActivationTrace> traces;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& name = tasks_[i]->spec.name;
        write_record(dir / name, res[i]->record);
        serialize_fusion(res[i]->psi, meta(mode, seed, name), dir / name / "fusion.ckpt");
        save_head(res[i]->head, fp, meta(mode, seed, name), dir / name / "head.ckpt");
        write_file_atomic(dir / name / "trace.json", dump(res[i]->trace.to_json()));
        traces.push_back(res[i]->trace);
        acc[name] = res[i]->record.test_accuracy.at(name);
      }
      const auto rows = heatmap_rows(traces, default_heatmap_layers(theta.config.num_layers));
      write_file_atomic(dir / "heatmap.csv", heatmap_csv(rows));
    }
    return acc;
  }

  const ExperimentConfig& cfg_;
  fs::path out_;
  std::size_t workers_;
  std::ostream* log_;
  Suite suite_;
  std::vector<const TaskDataset*> tasks_;
  BackboneParams theta_;
  RunSummary summary_;
};

}  // namespace

RunSummary run_experiment(const ExperimentConfig& cfg, const fs::path& out, bool force, std::size_t workers,
                          std::ostream* log) {
  cfg.validate();
  prepare_output_dir(out, force);
  return Pipeline(cfg, out, std::max<std::size_t>(workers, 1), log).run();
}

}  // namespace adafuse
