// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>

#include "adafuse/autodiff/optim.hpp"
#include "adafuse/container.hpp"
#include "adafuse/error.hpp"
#include "adafuse/rng.hpp"

namespace adafuse {

using ad::Tensor;

std::string to_string(Schedule s) { return s == Schedule::constant ? "constant" : "linear_decay"; }

std::string to_string(MtSampling s) {
  switch (s) {
    case MtSampling::proportional: return "proportional";
    case MtSampling::sqrt: return "sqrt";
    case MtSampling::uniform: return "uniform";
  }
  return "?";
}

std::string to_string(BaselineMode m) {
  switch (m) {
    case BaselineMode::head_only: return "head_only";
    case BaselineMode::full: return "full";
    case BaselineMode::sequential: return "sequential";
  }
  return "?";
}

BaselineMode parse_baseline_mode(const std::string& text) {
  for (auto m : {BaselineMode::head_only, BaselineMode::full, BaselineMode::sequential}) {
    if (to_string(m) == text) return m;
  }
  throw ConfigError("unknown baseline mode '" + text + "'");
}

// ---- config ----

TrainConfig TrainConfig::adapter_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::fusion_defaults() {
  TrainConfig c;
  c.base_lr = 5e-5;
  c.max_epochs = 10;
  return c;
}

void TrainConfig::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (fusion_lambda < 0.0) throw ConfigError("fusion_lambda must be >= 0");
}

Json TrainConfig::to_json() const {
  return Json{{"base_lr", base_lr},
              {"batch_size", batch_size},
              {"max_epochs", max_epochs},
              {"early_stop_patience", early_stop_patience},
              {"eval_every", eval_every},
              {"seed", seed},
              {"weight_decay", weight_decay},
              {"schedule", to_string(schedule)},
              {"mt_sampling", to_string(mt_sampling)},
              {"fusion_lambda", fusion_lambda},
              {"reuse_head", reuse_head},
              {"optimizer", "adamw"}};
}

TrainConfig TrainConfig::from_json(const Json& j, const std::string& path, const TrainConfig& base) {
  JsonReader r(j, path);
  TrainConfig c = base;
  c.base_lr = r.get("base_lr", c.base_lr);
  c.batch_size = r.get("batch_size", c.batch_size);
  c.max_epochs = r.get("max_epochs", c.max_epochs);
  c.early_stop_patience = r.get("early_stop_patience", c.early_stop_patience);
  c.eval_every = r.get("eval_every", c.eval_every);
  c.seed = r.get("seed", c.seed);
  c.weight_decay = r.get("weight_decay", c.weight_decay);
  const auto schedule = r.get<std::string>("schedule", to_string(c.schedule));
  if (schedule == "linear_decay") {
    c.schedule = Schedule::linear_decay;
  } else if (schedule == "constant") {
    c.schedule = Schedule::constant;
  } else {
    throw ConfigError(r.field("schedule") + ": expected linear_decay or constant");
  }
  const auto sampling = r.get<std::string>("mt_sampling", to_string(c.mt_sampling));
  if (sampling == "proportional") {
    c.mt_sampling = MtSampling::proportional;
  } else if (sampling == "sqrt") {
    c.mt_sampling = MtSampling::sqrt;
  } else if (sampling == "uniform") {
    c.mt_sampling = MtSampling::uniform;
  } else {
    throw ConfigError(r.field("mt_sampling") + ": expected proportional, sqrt or uniform");
  }
  c.fusion_lambda = r.get("fusion_lambda", c.fusion_lambda);
  c.reuse_head = r.get("reuse_head", c.reuse_head);
  if (r.has("optimizer") && r.require<std::string>("optimizer") != "adamw") {
    throw ConfigError(r.field("optimizer") + ": only adamw is supported");
  }
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

// ---- heads and models ----

ClassifierHead ClassifierHead::init(const std::string& task, std::size_t hidden_dim,
                                    std::size_t num_classes, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "head/" + task));
  std::vector<double> w(hidden_dim * num_classes);
  for (double& x : w) x = rng.normal(0.0, 0.02);
  ClassifierHead h;
  h.task = task;
  h.weight = Tensor::parameter("head." + task + ".weight", {hidden_dim, num_classes}, std::move(w));
  h.bias = Tensor::parameter("head." + task + ".bias", {num_classes},
                             std::vector<double>(num_classes, 0.0));
  return h;
}

ad::ParamSet ClassifierHead::params() const {
  ad::ParamSet ps;
  ps.add(weight);
  ps.add(bias);
  return ps;
}

ClassifierHead ClassifierHead::clone() const {
  return ClassifierHead{task, weight.clone(), bias.clone()};
}

Tensor model_logits(const Model& model, const TokenBatch& batch, Rng* dropout_rng) {
  if (!model.theta || !model.head) throw UsageError("model needs a backbone and a head");
  EncoderOutput out = encoder_forward(*model.theta, batch, model.hooks, dropout_rng);
  std::vector<std::size_t> rows(batch.batch);
  for (std::size_t i = 0; i < batch.batch; ++i) rows[i] = i * batch.seq;
  return ad::linear(ad::gather_rows(out.hidden, rows), model.head->weight, model.head->bias);
}

EvalResult evaluate(const Model& model, const InstanceSet& split, std::size_t batch_size) {
  const std::size_t c = model.head->num_classes();
  EvalResult r;
  r.class_correct.assign(c, 0);
  r.class_total.assign(c, 0);
  if (split.empty()) return r;
  ad::NoGradGuard no_grad;
  for (const auto& b : ordered_batches(split, batch_size)) {
    Tensor logits = model_logits(model, b.tokens);
    const auto z = logits.data();
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      const int label = b.labels[i];
      if (label < 0 || static_cast<std::size_t>(label) >= c) {
        throw DataError("label " + std::to_string(label) + " outside the head's " +
                        std::to_string(c) + " classes");
      }
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k) {
        if (z[i * c + k] > z[i * c + best]) best = k;
      }
      ++r.class_total[label];
      ++r.total;
      if (best == static_cast<std::size_t>(label)) {
        ++r.class_correct[label];
        ++r.correct;
      }
    }
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

void check_task_fits(const BackboneConfig& config, const TaskDataset& task) {
  for (const InstanceSet* s : {static_cast<const InstanceSet*>(&task.train),
                               static_cast<const InstanceSet*>(&task.dev),
                               static_cast<const InstanceSet*>(&task.test)}) {
    for (const auto& it : s->items) {
      try {
        check_sequence(config, it.tokens);
      } catch (const DataError& e) {
        throw ConfigError("task '" + task.spec.name + "' does not fit the backbone: " + e.what());
      }
    }
  }
}

// ---- run records ----

std::vector<std::string> RunRecord::changed() const {
  std::vector<std::string> out;
  for (const auto& [name, after] : digest_after) {
    auto it = digest_before.find(name);
    if (it == digest_before.end() || it->second != after) out.push_back(name);
  }
  return out;
}

Json RunRecord::metrics_json() const {
  Json j = to_json();
  j.erase("wall_time_s");
  return j;
}

Json RunRecord::to_json() const {
  Json epochs_json = Json::array();
  for (const auto& e : epochs) {
    Json ej{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"dev_accuracy", e.dev_accuracy}};
    if (!e.task_dev_accuracy.empty()) ej["task_dev_accuracy"] = e.task_dev_accuracy;
    epochs_json.push_back(ej);
  }
  Json j{{"mode", mode},
         {"tasks", tasks},
         {"epochs", epochs_json},
         {"best_epoch", best_epoch},
         {"best_dev_accuracy", best_dev_accuracy},
         {"dev_accuracy", dev_accuracy},
         {"test_accuracy", test_accuracy},
         {"wall_time_s", wall_time_s},
         {"seed", seed},
         {"backbone_pretrained", backbone_pretrained},
         {"config", config},
         {"digest_before", digest_before},
         {"digest_after", digest_after}};
  if (!stage_dev_accuracy.empty()) j["stage_dev_accuracy"] = stage_dev_accuracy;
  if (!backbone_pretrained) j["warning"] = "random_backbone";
  if (!extra.empty()) j["extra"] = extra;
  return j;
}

RunRecord RunRecord::from_json(const Json& j) {
  RunRecord r;
  try {
    r.mode = j.at("mode").get<std::string>();
    r.tasks = j.at("tasks").get<std::vector<std::string>>();
    for (const auto& e : j.at("epochs")) {
      EpochRecord er;
      er.epoch = e.at("epoch").get<std::size_t>();
      er.train_loss = e.at("train_loss").get<double>();
      er.dev_accuracy = e.at("dev_accuracy").get<double>();
      if (e.contains("task_dev_accuracy")) {
        er.task_dev_accuracy = e.at("task_dev_accuracy").get<std::map<std::string, double>>();
      }
      r.epochs.push_back(er);
    }
    r.best_epoch = j.at("best_epoch").get<std::size_t>();
    r.best_dev_accuracy = j.at("best_dev_accuracy").get<double>();
    r.dev_accuracy = j.at("dev_accuracy").get<std::map<std::string, double>>();
    r.test_accuracy = j.at("test_accuracy").get<std::map<std::string, double>>();
    r.wall_time_s = j.value("wall_time_s", 0.0);
    r.seed = j.at("seed").get<std::uint64_t>();
    r.backbone_pretrained = j.value("backbone_pretrained", true);
    r.config = j.value("config", Json::object());
    r.digest_before = j.at("digest_before").get<std::map<std::string, std::string>>();
    r.digest_after = j.at("digest_after").get<std::map<std::string, std::string>>();
    if (j.contains("stage_dev_accuracy")) {
      r.stage_dev_accuracy = j.at("stage_dev_accuracy").get<std::vector<std::map<std::string, double>>>();
    }
    r.extra = j.value("extra", Json::object());
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed run record: ") + e.what());
  }
  return r;
}

// ---- sampling ----

std::vector<double> sampling_probabilities(const std::vector<std::size_t>& sizes, MtSampling mode) {
  if (sizes.empty()) throw UsageError("no tasks to sample from");
  const double alpha = mode == MtSampling::proportional ? 1.0 : mode == MtSampling::sqrt ? 0.5 : 0.0;
  std::vector<double> p;
  double total = 0.0;
  for (std::size_t n : sizes) {
    if (n == 0) throw DataError("cannot sample from an empty training split");
    p.push_back(std::pow(static_cast<double>(n), alpha));
    total += p.back();
  }
  for (double& x : p) x /= total;
  return p;
}

std::size_t sample_task(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

// ---- the training loop ----

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct FitTask {
  const TaskDataset* data;
  const HookSet* hooks;
  const ClassifierHead* head;
  ad::ParamSet step_params;  // updated on this task's batches
};

struct FitOutcome {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_dev = -1.0;
};

// One batch stream per task; a new shuffled pass starts when one runs out.
class BatchStream {
 public:
  BatchStream(const TaskDataset& task, std::size_t batch_size, std::uint64_t seed)
      : task_(task), batch_size_(batch_size), seed_(derive_seed(seed, "batches/" + task.spec.name)) {}

  const Batch& next() {
    if (pos_ >= current_.size()) {
      current_ = batches(task_.train, batch_size_, seed_, pass_++);
      pos_ = 0;
    }
    return current_[pos_++];
  }
  std::size_t batches_per_pass() const {
    return (task_.train.size() + batch_size_ - 1) / batch_size_;
  }

 private:
  const TaskDataset& task_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t pass_ = 0;
  std::size_t pos_ = 0;
  std::vector<Batch> current_;
};

// `groups` holds every trainable tensor of the run; adapter tensor names repeat
// across tasks, so they are kept in separate sets.
FitOutcome fit(const BackboneParams& theta, const std::vector<FitTask>& tasks,
               const std::vector<ad::ParamSet>& groups, const TrainConfig& cfg,
               const std::function<Tensor()>& extra_loss = {}) {
  for (const auto& t : tasks) {
    if (t.data->train.empty()) throw DataError("task '" + t.data->spec.name + "' has an empty train split");
    if (t.data->dev.empty()) throw DataError("task '" + t.data->spec.name + "' has an empty dev split");
  }
  ad::AdamW opt({.lr = cfg.base_lr, .weight_decay = cfg.weight_decay});
  std::vector<BatchStream> streams;
  std::vector<std::size_t> sizes;
  std::size_t steps_per_epoch = 0;
  for (const auto& t : tasks) {
    streams.emplace_back(*t.data, cfg.batch_size, cfg.seed);
    sizes.push_back(t.data->train.size());
    steps_per_epoch += streams.back().batches_per_pass();
  }
  const std::vector<double> probs = sampling_probabilities(sizes, cfg.mt_sampling);
  const std::uint64_t total_steps = steps_per_epoch * cfg.max_epochs;
  Rng sampler(derive_seed(cfg.seed, "mt/sampling"));
  Rng dropout(derive_seed(cfg.seed, "dropout"));

  FitOutcome out;
  auto snapshot = [&] {
    std::vector<std::vector<std::vector<double>>> v;
    for (const auto& g : groups) v.push_back(ad::snapshot_values(g));
    return v;
  };
  auto clear = [&] {
    for (const auto& g : groups) g.clear_grad();
  };
  auto best_values = snapshot();
  std::size_t since_best = 0;
  std::size_t evals = 0;
  std::uint64_t step = 0;
  bool stop = false;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;

  auto evaluate_point = [&] {
    ++evals;
    EpochRecord rec;
    rec.epoch = evals;
    rec.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    double mean = 0.0;
    for (const auto& t : tasks) {
      const double acc = evaluate({&theta, t.hooks, t.head}, t.data->dev).accuracy;
      if (tasks.size() > 1) rec.task_dev_accuracy[t.data->spec.name] = acc;
      mean += acc;
    }
    rec.dev_accuracy = mean / static_cast<double>(tasks.size());
    out.epochs.push_back(rec);
    loss_sum = 0.0;
    loss_count = 0;
    if (rec.dev_accuracy > out.best_dev) {
      out.best_dev = rec.dev_accuracy;
      out.best_epoch = evals;
      best_values = snapshot();
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience) {
      stop = true;
    }
  };

  for (std::size_t epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
    for (std::size_t s = 0; s < steps_per_epoch && !stop; ++s) {
      const std::size_t k = tasks.size() == 1 ? 0 : sample_task(probs, sampler);
      const FitTask& t = tasks[k];
      const Batch& batch = streams[k].next();
      clear();
      Tensor loss = ad::cross_entropy(
          model_logits({&theta, t.hooks, t.head}, batch.tokens, &dropout), batch.labels);
      loss_sum += loss.item();
      ++loss_count;
      if (extra_loss) loss = ad::add(loss, extra_loss());
      ad::backward(loss);
      const double lr = cfg.schedule == Schedule::linear_decay
                            ? ad::linear_decay_lr(step, total_steps, cfg.base_lr)
                            : cfg.base_lr;
      opt.step(t.step_params, lr);
      ++step;
      if (cfg.eval_every > 0 && step % cfg.eval_every == 0) evaluate_point();
    }
    if (cfg.eval_every == 0) evaluate_point();
  }
  clear();
  for (std::size_t i = 0; i < groups.size(); ++i) ad::restore_values(groups[i], best_values[i]);
  return out;
}

ad::ParamSet trainable_only(const ad::ParamSet& ps) {
  ad::ParamSet out;
  for (const auto& t : ps) {
    if (t.trainable()) out.add(t);
  }
  return out;
}

void fill_outcome(RunRecord& rec, const FitOutcome& out) {
  rec.epochs.insert(rec.epochs.end(), out.epochs.begin(), out.epochs.end());
  rec.best_epoch = out.best_epoch;
  rec.best_dev_accuracy = out.best_dev;
}

RunRecord new_record(const std::string& mode, const BackboneParams& theta0, const TrainConfig& cfg) {
  RunRecord r;
  r.mode = mode;
  r.seed = cfg.seed;
  r.backbone_pretrained = theta0.pretrained;
  r.config = Json{{"train", cfg.to_json()}, {"backbone", theta0.config.to_json()}};
  return r;
}

void final_eval(RunRecord& rec, const Model& model, const TaskDataset& task) {
  rec.dev_accuracy[task.spec.name] = evaluate(model, task.dev).accuracy;
  rec.test_accuracy[task.spec.name] = evaluate(model, task.test).accuracy;
}

BackboneParams frozen_copy(const BackboneParams& theta0) {
  BackboneParams theta = theta0.clone();
  theta.params().set_trainable(false);
  return theta;
}

}  // namespace

// ---- stage 1 ----

StAdapterResult train_st_adapter(const BackboneParams& theta0, const TaskDataset& task,
                                 const AdapterConfig& adapter, const TrainConfig& cfg) {
  cfg.validate();
  check_task_fits(theta0.config, task);
  const auto t0 = Clock::now();
  const std::string& name = task.spec.name;
  BackboneParams theta = frozen_copy(theta0);
  AdapterParams phi = make_adapter(theta.config, adapter, derive_seed(cfg.seed, "task/" + name), name);
  ClassifierHead head = ClassifierHead::init(name, theta.config.hidden_dim, task.num_classes, cfg.seed);

  RunRecord rec = new_record("st-a", theta0, cfg);
  rec.tasks = {name};
  rec.config["adapter"] = adapter.to_json();
  rec.digest_before = {{"theta", ad::set_digest(theta0.params())},
                       {"adapter:" + name, ad::set_digest(phi.params())},
                       {"head:" + name, ad::set_digest(head.params())}};

  HookSet hooks(theta.config.num_layers);
  install_adapter(hooks, phi);
  ad::ParamSet trainable = phi.params();
  trainable.extend(head.params());
  trainable.set_trainable(true);
  fill_outcome(rec, fit(theta, {{&task, &hooks, &head, trainable}}, {trainable}, cfg));
  final_eval(rec, {&theta, &hooks, &head}, task);

  rec.digest_after = {{"theta", ad::set_digest(theta0.params())},
                      {"adapter:" + name, ad::set_digest(phi.params())},
                      {"head:" + name, ad::set_digest(head.params())}};
  rec.wall_time_s = seconds_since(t0);
  return {std::move(phi), std::move(head), std::move(rec)};
}

MtAdapterResult train_mt_adapters(const BackboneParams& theta0,
                                  const std::vector<const TaskDataset*>& tasks,
                                  const AdapterConfig& adapter, const TrainConfig& cfg) {
  cfg.validate();
  if (tasks.size() < 2) throw UsageError("multi-task adapter training needs at least 2 tasks");
  for (const auto* t : tasks) check_task_fits(theta0.config, *t);
  const auto t0 = Clock::now();
  MtAdapterResult res;
  res.theta = theta0.clone();
  res.theta.params().set_trainable(true);
  RunRecord& rec = res.record;
  rec = new_record("mt-a", theta0, cfg);
  rec.config["adapter"] = adapter.to_json();
  rec.digest_before["theta"] = ad::set_digest(theta0.params());
  for (const auto* t : tasks) {
    const std::string& name = t->spec.name;
    rec.tasks.push_back(name);
    res.adapters.push_back(
        make_adapter(theta0.config, adapter, derive_seed(cfg.seed, "task/" + name), name));
    res.heads.push_back(ClassifierHead::init(name, theta0.config.hidden_dim, t->num_classes, cfg.seed));
    rec.digest_before["adapter:" + name] = ad::set_digest(res.adapters.back().params());
    rec.digest_before["head:" + name] = ad::set_digest(res.heads.back().params());
  }
  std::vector<HookSet> hooks(tasks.size(), HookSet(theta0.config.num_layers));
  std::vector<ad::ParamSet> all{res.theta.params()};
  std::vector<FitTask> fit_tasks;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    install_adapter(hooks[i], res.adapters[i]);
    ad::ParamSet step = res.theta.params();
    step.extend(res.adapters[i].params());
    step.extend(res.heads[i].params());
    step.set_trainable(true);
    all.push_back(res.adapters[i].params());
    all.push_back(res.heads[i].params());
    fit_tasks.push_back({tasks[i], &hooks[i], &res.heads[i], step});
  }
  fill_outcome(rec, fit(res.theta, fit_tasks, all, cfg));
  rec.digest_after["theta"] = ad::set_digest(res.theta.params());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    final_eval(rec, {&res.theta, &hooks[i], &res.heads[i]}, *tasks[i]);
    const std::string& name = tasks[i]->spec.name;
    rec.digest_after["adapter:" + name] = ad::set_digest(res.adapters[i].params());
    rec.digest_after["head:" + name] = ad::set_digest(res.heads[i].params());
  }
  rec.wall_time_s = seconds_since(t0);
  return res;
}

// ---- stage 2 ----

FusionResult train_fusion(const BackboneParams& theta_in, const std::vector<AdapterParams>& members_in,
                          const TaskDataset& target, const TrainConfig& cfg,
                          const FusionConfig& fusion, const ClassifierHead* stage1_head) {
  cfg.validate();
  check_task_fits(theta_in.config, target);
  const auto t0 = Clock::now();
  const std::string& name = target.spec.name;
  BackboneParams theta = frozen_copy(theta_in);
  std::vector<AdapterParams> members;
  for (const auto& m : members_in) {
    members.push_back(m.clone());
    members.back().params().set_trainable(false);
  }
  FusionResult res;
  res.psi = fusion_init(theta.config, members, cfg.seed, name, fusion);
  for (std::size_t l = res.psi.active_layers(); l < res.psi.num_layers; ++l) {
    res.psi.query[l].set_trainable(false);
    res.psi.key[l].set_trainable(false);
    res.psi.value[l].set_trainable(false);
  }
  if (cfg.reuse_head && stage1_head) {
    if (stage1_head->num_classes() != target.num_classes) {
      throw CompatibilityError("stage-1 head has the wrong class count for '" + name + "'");
    }
    res.head = stage1_head->clone();
  } else {
    res.head = ClassifierHead::init(name, theta.config.hidden_dim, target.num_classes,
                                    derive_seed(cfg.seed, "fusion-head"));
  }
  res.head.params().set_trainable(true);

  RunRecord& rec = res.record;
  rec = new_record("fusion", theta_in, cfg);
  rec.tasks = {name};
  rec.config["fusion"] = fusion.to_json();
  rec.config["members"] = res.psi.members;
  rec.digest_before["theta"] = ad::set_digest(theta_in.params());
  for (const auto& m : members_in) rec.digest_before["adapter:" + m.task] = ad::set_digest(m.params());
  rec.digest_before["fusion"] = ad::set_digest(res.psi.params());
  rec.digest_before["head:" + name] = ad::set_digest(res.head.params());

  HookSet hooks(theta.config.num_layers);
  install_fusion(hooks, res.psi, members);
  ad::ParamSet trainable = trainable_only(res.psi.params());
  trainable.extend(res.head.params());
  std::function<Tensor()> reg;
  if (cfg.fusion_lambda > 0.0) reg = [&] { return fusion_regularizer(res.psi, cfg.fusion_lambda); };
  fill_outcome(rec, fit(theta, {{&target, &hooks, &res.head, trainable}}, {trainable}, cfg, reg));
  final_eval(rec, {&theta, &hooks, &res.head}, target);
  res.trace = trace_activations(res.psi, theta, members, target.dev.sequences());
  rec.extra["trace"] = res.trace.to_json();

  rec.digest_after["theta"] = ad::set_digest(theta_in.params());
  for (const auto& m : members_in) rec.digest_after["adapter:" + m.task] = ad::set_digest(m.params());
  rec.digest_after["fusion"] = ad::set_digest(res.psi.params());
  rec.digest_after["head:" + name] = ad::set_digest(res.head.params());
  rec.wall_time_s = seconds_since(t0);
  return res;
}

// ---- baselines ----

BaselineResult train_baseline(const BackboneParams& theta0, const std::vector<const TaskDataset*>& tasks,
                              BaselineMode mode, const TrainConfig& cfg) {
  cfg.validate();
  if (tasks.empty()) throw UsageError("baseline training needs at least one task");
  if (mode != BaselineMode::sequential && tasks.size() != 1) {
    throw UsageError(to_string(mode) + " baseline trains exactly one task");
  }
  for (const auto* t : tasks) check_task_fits(theta0.config, *t);
  const auto t0 = Clock::now();
  BaselineResult res;
  res.theta = theta0.clone();
  res.theta.params().set_trainable(mode != BaselineMode::head_only);
  RunRecord& rec = res.record;
  rec = new_record(to_string(mode), theta0, cfg);
  rec.digest_before["theta"] = ad::set_digest(theta0.params());
  for (const auto* t : tasks) {
    rec.tasks.push_back(t->spec.name);
    res.heads.push_back(ClassifierHead::init(t->spec.name, theta0.config.hidden_dim, t->num_classes, cfg.seed));
    rec.digest_before["head:" + t->spec.name] = ad::set_digest(res.heads.back().params());
  }
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    ad::ParamSet trainable = trainable_only(res.theta.params());
    trainable.extend(res.heads[k].params());
    trainable.set_trainable(true);
    TrainConfig stage = cfg;
    stage.seed = derive_seed(cfg.seed, "stage/" + std::to_string(k));
    fill_outcome(rec, fit(res.theta, {{tasks[k], nullptr, &res.heads[k], trainable}}, {trainable}, stage));
    if (mode == BaselineMode::sequential) {
      std::map<std::string, double> after;
      for (std::size_t j = 0; j <= k; ++j) {
        after[tasks[j]->spec.name] = evaluate({&res.theta, nullptr, &res.heads[j]}, tasks[j]->dev).accuracy;
      }
      rec.stage_dev_accuracy.push_back(after);
    }
  }
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    final_eval(rec, {&res.theta, nullptr, &res.heads[k]}, *tasks[k]);
    rec.digest_after["head:" + tasks[k]->spec.name] = ad::set_digest(res.heads[k].params());
  }
  rec.digest_after["theta"] = ad::set_digest(res.theta.params());
  rec.wall_time_s = seconds_since(t0);
  return res;
}

// ---- head checkpoints ----

void save_head(const ClassifierHead& head, const std::string& fingerprint, const Json& metadata,
               const std::filesystem::path& path) {
  Container c;
  c.config = Json{{"task", head.task},
                  {"hidden_dim", head.weight.shape()[0]},
                  {"num_classes", head.num_classes()}};
  c.fingerprint = fingerprint;
  c.metadata = metadata;
  c.tensors = copy_tensors(head.params());
  write_container(path, c);
}

ClassifierHead load_head(const std::filesystem::path& path, const BackboneConfig& backbone) {
  Container c = read_container(path);
  if (c.fingerprint != backbone.fingerprint()) {
    throw CompatibilityError(path.string() + ": head was trained for backbone " + c.fingerprint +
                             ", current backbone is " + backbone.fingerprint());
  }
  ClassifierHead h;
  try {
    h.task = c.config.at("task").get<std::string>();
    const auto classes = c.config.at("num_classes").get<std::size_t>();
    const std::size_t d = backbone.hidden_dim;
    if (c.tensors.size() != 2 || c.tensors[0].shape() != ad::Shape{d, classes} ||
        c.tensors[1].shape() != ad::Shape{classes}) {
      throw FormatError(path.string() + ": head tensors do not match the stored config");
    }
  } catch (const Json::exception& e) {
    throw FormatError(path.string() + ": malformed head config: " + e.what());
  }
  h.weight = c.tensors[0].detach();
  h.bias = c.tensors[1].detach();
  h.weight.set_trainable(true);
  h.bias.set_trainable(true);
  return h;
}

}  // namespace adafuse
