// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance checks. Each criterion prints one PASS/FAIL line with its wall
// time; the exit status is nonzero when any criterion fails or exceeds its
// time limit.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "adafuse/analysis.hpp"
#include "adafuse/checks.hpp"
#include "adafuse/error.hpp"
#include "adafuse/experiment.hpp"

using namespace adafuse;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeeds[] = {1, 2, 3};

struct Outcome {
  bool passed = true;
  std::vector<std::string> notes;

  void expect(bool ok, const std::string& what) {
    if (!ok) passed = false;
    notes.push_back(std::string(ok ? "  ok   " : "  FAIL ") + what);
  }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

bool bit_equal(const ad::ParamSet& a, const ad::ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.tensors()[i].name() != b.tensors()[i].name()) return false;
    if (!bit_equal(a.tensors()[i], b.tensors()[i])) return false;
  }
  return true;
}

std::string joined(std::vector<std::string> v) {
  std::sort(v.begin(), v.end());
  std::string s = "{";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
  return s + "}";
}

// ---- shared toy setup ----

BackboneConfig toy_backbone() {
  BackboneConfig b;
  b.vocab_size = 64;
  b.max_seq_len = 12;
  b.hidden_dim = 32;
  b.num_layers = 2;
  b.num_heads = 2;
  b.ffn_dim = 64;
  return b;
}

TaskSpec task(const std::string& name, TaskKind kind, std::size_t train, std::size_t markers = 2) {
  TaskSpec t;
  t.name = name;
  t.kind = kind;
  t.markers_per_class = markers;
  t.train_size = train;
  t.dev_size = 500;
  t.test_size = 500;
  return t;
}

TaskSpec clone_of(const std::string& name, const std::string& source, std::size_t train) {
  TaskSpec t = task(name, TaskKind::clone, train);
  t.links.push_back({source, 1.0});
  return t;
}

Suite make_suite(std::vector<TaskSpec> tasks, std::uint64_t seed) {
  SuiteConfig c;
  c.vocab.vocab_size = 64;
  c.vocab.min_len = 6;
  c.vocab.max_len = 12;
  c.corpus_size = 2000;
  c.tasks = std::move(tasks);
  return generate_suite(c, seed);
}

BackboneParams pretrained(const Suite& suite, std::uint64_t seed) {
  PretrainConfig pc;
  pc.steps = 300;
  pc.seed = seed;
  return pretrain_mlm(toy_backbone(), suite.corpus, pc).params;
}

TrainConfig train_cfg(double lr, std::size_t epochs, std::uint64_t seed) {
  TrainConfig t;
  t.base_lr = lr;
  t.batch_size = 32;
  t.max_epochs = epochs;
  t.seed = seed;
  return t;
}

// Transfer suite: a large order task, its small clone and two unrelated tasks.
std::vector<TaskSpec> transfer_tasks() {
  return {task("src", TaskKind::order, 4000, 3), clone_of("tgt", "src", 200),
          task("par", TaskKind::parity, 1000), task("kw", TaskKind::keyword, 1000, 3)};
}

struct Stage1 {
  Suite suite;
  BackboneParams theta;
  std::vector<AdapterParams> members;
  std::map<std::string, double> own_dev;
};

Stage1 transfer_stage1(std::uint64_t seed) {
  Suite s = make_suite(transfer_tasks(), seed);
  BackboneParams theta = pretrained(s, seed);
  Stage1 out{std::move(s), std::move(theta), {}, {}};
  for (const auto& t : out.suite.tasks) {
    auto r = train_st_adapter(out.theta, t, AdapterConfig::pfeiffer(2), train_cfg(3e-3, 20, seed));
    out.own_dev[t.spec.name] = r.record.dev_accuracy.at(t.spec.name);
    out.members.push_back(std::move(r.adapter));
  }
  return out;
}

std::size_t member_index(const std::vector<AdapterParams>& members, const std::string& name) {
  for (std::size_t i = 0; i < members.size(); ++i) {
    if (members[i].task == name) return i;
  }
  throw UsageError("no member " + name);
}

// ---- criteria ----

Outcome gradients() {
  Outcome o;
  for (const auto& [label, wiring] :
       {std::pair{"pfeiffer", AdapterConfig::pfeiffer(2)}, std::pair{"houlsby", AdapterConfig::houlsby(2)}}) {
    for (const auto& g : check_fused_model_gradients(wiring, 1, 1e-5, 1e-4)) {
      o.expect(g.report.passed, fmt("%s %s: %zu tensors, max rel err %.2e", label, g.group.c_str(),
                                    g.report.params.size(), g.report.max_rel_error));
    }
  }
  return o;
}

Outcome freeze_ledger() {
  Outcome o;
  BackboneConfig b = toy_backbone();
  b.hidden_dim = 16;
  b.ffn_dim = 32;
  const Suite s = make_suite({task("a", TaskKind::keyword, 200), task("b", TaskKind::order, 200)}, 5);
  const BackboneParams theta0 = BackboneParams::init(b, 5);
  const BackboneParams theta_copy = theta0.clone();
  const TrainConfig tc = train_cfg(3e-3, 1, 5);
  const AdapterConfig ac = AdapterConfig::pfeiffer(4);
  auto check = [&](const std::string& mode, const RunRecord& r, std::vector<std::string> expected) {
    o.expect(joined(r.changed()) == joined(expected),
             mode + ": changed " + joined(r.changed()) + ", trainable " + joined(expected));
  };

  auto sa = train_st_adapter(theta0, s.task("a"), ac, tc);
  auto sb = train_st_adapter(theta0, s.task("b"), ac, tc);
  check("st-a", sa.record, {"adapter:a", "head:a"});

  auto mt = train_mt_adapters(theta0, {&s.task("a"), &s.task("b")}, ac, tc);
  check("mt-a", mt.record, {"theta", "adapter:a", "adapter:b", "head:a", "head:b"});

  const std::vector<AdapterParams> members{sa.adapter, sb.adapter};
  std::vector<AdapterParams> member_copies;
  for (const auto& m : members) member_copies.push_back(m.clone());
  auto fu = train_fusion(theta0, members, s.task("a"), tc);
  check("fusion", fu.record, {"fusion", "head:a"});
  for (std::size_t i = 0; i < members.size(); ++i) {
    o.expect(bit_equal(members[i].params(), member_copies[i].params()),
             "fusion: member adapter " + members[i].task + " bit-identical to its input");
  }
  const BackboneParams mt_theta = mt.theta.clone();
  auto fm = train_fusion(mt.theta, mt.adapters, s.task("b"), tc);
  check("fusion w/ mt-a", fm.record, {"fusion", "head:b"});
  o.expect(bit_equal(mt.theta.params(), mt_theta.params()), "fusion w/ mt-a: theta' bit-identical");

  auto ho = train_baseline(theta0, {&s.task("a")}, BaselineMode::head_only, tc);
  check("head_only", ho.record, {"head:a"});
  auto fl = train_baseline(theta0, {&s.task("a")}, BaselineMode::full, tc);
  check("full", fl.record, {"theta", "head:a"});
  auto sq = train_baseline(theta0, {&s.task("a"), &s.task("b")}, BaselineMode::sequential, tc);
  check("sequential", sq.record, {"theta", "head:a", "head:b"});

  o.expect(bit_equal(theta0.params(), theta_copy.params()), "caller's theta0 bit-identical after every mode");
  return o;
}

Outcome identity_embedding() {
  Outcome o;
  BackboneConfig b = toy_backbone();
  b.hidden_dim = 16;
  b.ffn_dim = 32;
  const Suite s = make_suite({task("a", TaskKind::keyword, 300)}, 9);
  const BackboneParams theta = BackboneParams::init(b, 9);
  for (const AdapterConfig& ac : {AdapterConfig::pfeiffer(4), AdapterConfig::houlsby(4)}) {
    auto st = train_st_adapter(theta, s.task("a"), ac, train_cfg(1e-2, 2, 9));
    const std::vector<AdapterParams> members{st.adapter};
    FusionParams psi = fusion_init(b, members, 3);
    for (auto& v : psi.value) {
      auto data = v.mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) data[i] = (i % (b.hidden_dim + 1) == 0) ? 1.0 : 0.0;
    }
    HookSet fused(b.num_layers), plain(b.num_layers);
    install_fusion(fused, psi, members);
    install_adapter(plain, st.adapter);

    Rng rng(derive_seed(9, "random-inputs"));
    double max_diff = 0.0;
    std::size_t seen = 0;
    ad::NoGradGuard guard;
    while (seen < 1000) {
      std::vector<std::vector<int>> seqs;
      for (std::size_t i = 0; i < 50; ++i, ++seen) {
        const std::size_t len = 2 + rng.below(b.max_seq_len - 1);
        std::vector<int> x{kClsToken};
        while (x.size() < len) x.push_back(3 + static_cast<int>(rng.below(b.vocab_size - 3)));
        seqs.push_back(std::move(x));
      }
      const TokenBatch batch = TokenBatch::pack(seqs);
      const Tensor a = model_logits({&theta, &fused, &st.head}, batch);
      const Tensor c = model_logits({&theta, &plain, &st.head}, batch);
      for (std::size_t i = 0; i < a.numel(); ++i) max_diff = std::max(max_diff, std::abs(a.data()[i] - c.data()[i]));
    }
    o.expect(max_diff == 0.0, fmt("%s: max |fused - st-a| over %zu inputs = %g", to_string(ac.preset).c_str(),
                                  seen, max_diff));
  }
  return o;
}

Outcome normalization() {
  Outcome o;
  BackboneConfig b = toy_backbone();
  b.hidden_dim = 16;
  b.ffn_dim = 32;
  const Suite s = make_suite(
      {task("a", TaskKind::keyword, 200), task("b", TaskKind::order, 200), task("c", TaskKind::parity, 200)}, 4);
  const BackboneParams theta = BackboneParams::init(b, 4);
  std::vector<AdapterParams> members;
  for (const auto& t : s.tasks) {
    members.push_back(train_st_adapter(theta, t, AdapterConfig::pfeiffer(4), train_cfg(1e-2, 2, 4)).adapter);
  }
  std::vector<FusionActivationTrace> traces;
  for (const auto& t : s.tasks) {
    auto f = train_fusion(theta, members, t, train_cfg(1e-2, 3, 4));
    o.expect(f.trace.instance_count == t.dev.size() && f.trace.max_row_sum_error <= 1e-12,
             fmt("%s: per-position weight sums over %zu dev instances, max |sum - 1| = %.1e", t.spec.name.c_str(),
                 f.trace.instance_count, f.trace.max_row_sum_error));
    traces.push_back(f.trace);
  }
  // Parse the exported CSV back and sum each (layer, target) row.
  std::istringstream csv(heatmap_csv(heatmap_rows(traces, default_heatmap_layers(b.num_layers))));
  std::string line;
  std::getline(csv, line);
  std::map<std::pair<std::string, std::string>, double> sums;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    sums[{f[0], f[1]}] += std::stod(f[3]);
  }
  double worst = 0.0;
  for (const auto& [k, v] : sums) worst = std::max(worst, std::abs(v - 1.0));
  o.expect(sums.size() == 2 * s.tasks.size() && worst <= 1e-6,
           fmt("heatmap: %zu rows, max |row sum - 1| = %.1e", sums.size(), worst));
  return o;
}

Outcome parameter_accounting() {
  Outcome o;
  BackboneConfig b = toy_backbone();
  b.hidden_dim = 64;
  b.num_heads = 4;
  std::size_t mismatches = 0;
  const auto cells = GridSpec{}.cells();
  for (const auto& cell : cells) {
    const AdapterConfig c = cell.adapter_config();
    if (param_count(c, b) != make_adapter(b, c, 1).params().scalar_count()) ++mismatches;
  }
  o.expect(cells.size() == 576 && mismatches == 0,
           fmt("%zu grid cells, %zu closed-form/traversal mismatches", cells.size(), mismatches));
  BackboneConfig base = b;
  base.hidden_dim = 768;
  base.num_layers = 12;
  base.num_heads = 12;
  base.ffn_dim = 3072;
  for (std::size_t r : {2, 8, 16, 64}) {
    const std::size_t p = param_count(AdapterConfig::pfeiffer(r), base);
    const std::size_t h = param_count(AdapterConfig::houlsby(r), base);
    o.expect(h == 2 * p, fmt("d=768 L=12 r=%zu: houlsby %zu = 2 x pfeiffer %zu", r, h, p));
  }
  const std::size_t m = AdapterConfig::pfeiffer(64).bottleneck_dim(768);
  o.expect(m == 12, fmt("d=768, r=64 bottleneck = %zu", m));
  return o;
}

Outcome forgetting() {
  Outcome o;
  std::size_t degraded = 0;
  bool st_a_intact = true;
  for (std::uint64_t seed : kSeeds) {
    const Suite s = make_suite({task("A", TaskKind::keyword, 1000), task("B", TaskKind::order, 1000)}, seed);
    const BackboneParams theta = pretrained(s, seed);
    const auto& a = s.task("A");
    const auto& b = s.task("B");
    auto seq = train_baseline(theta, {&a, &b}, BaselineMode::sequential, train_cfg(1e-3, 10, seed));
    const double before = seq.record.stage_dev_accuracy.at(0).at("A");
    const double after = seq.record.stage_dev_accuracy.at(1).at("A");
    const double drop = 100.0 * (before - after);
    if (drop >= 5.0) ++degraded;
    o.notes.push_back(fmt("  seed %llu: sequential A dev %.2f -> %.2f (drop %.2f points)",
                          static_cast<unsigned long long>(seed), 100 * before, 100 * after, drop));

    auto st = train_st_adapter(theta, a, AdapterConfig::pfeiffer(2), train_cfg(3e-3, 10, seed));
    HookSet hooks(theta.config.num_layers);
    install_adapter(hooks, st.adapter);
    const Model model{&theta, &hooks, &st.head};
    Tensor first;
    {
      ad::NoGradGuard g;
      first = model_logits(model, TokenBatch::pack(a.dev.sequences()));
    }
    const EvalResult eval_before = evaluate(model, a.dev);
    (void)train_st_adapter(theta, b, AdapterConfig::pfeiffer(2), train_cfg(3e-3, 10, seed));
    Tensor second;
    {
      ad::NoGradGuard g;
      second = model_logits(model, TokenBatch::pack(a.dev.sequences()));
    }
    const bool same = bit_equal(first, second) && evaluate(model, a.dev).accuracy == eval_before.accuracy;
    st_a_intact = st_a_intact && same;
    o.notes.push_back(fmt("  seed %llu: st-a A dev %.2f, logits after training B's adapter %s",
                          static_cast<unsigned long long>(seed), 100 * eval_before.accuracy,
                          same ? "bit-identical" : "CHANGED"));
  }
  o.expect(degraded >= 2, fmt("sequential fine-tuning degrades A by >= 5 points in %zu/3 seeds", degraded));
  o.expect(st_a_intact, "st-a for A unchanged to the last bit in every seed");
  return o;
}

Outcome transfer() {
  Outcome o;
  std::size_t beat = 0, source_dominant = 0;
  for (std::uint64_t seed : kSeeds) {
    const Stage1 st = transfer_stage1(seed);
    const auto f = train_fusion(st.theta, st.members, st.suite.task("tgt"), train_cfg(3e-3, 20, seed));
    const double fused = f.record.dev_accuracy.at("tgt");
    const double own = st.own_dev.at("tgt");
    const double delta = 100.0 * (fused - own);
    if (delta >= 3.0) ++beat;
    const std::size_t src = member_index(st.members, "src");
    const double threshold = 1.0 / static_cast<double>(st.members.size()) + 0.15;
    std::size_t layers_above = 0, traced = 0;
    std::string acts;
    for (const auto& layer : f.trace.layers) {
      if (layer.empty()) continue;
      ++traced;
      if (layer[src] > threshold) ++layers_above;
      acts += fmt(" %.3f", layer[src]);
    }
    const bool majority = 2 * layers_above > traced;
    if (majority) ++source_dominant;
    o.notes.push_back(fmt("  seed %llu: fusion %.2f vs own st-a %.2f (%+.2f); source activation per layer:%s "
                          "(threshold %.3f)",
                          static_cast<unsigned long long>(seed), 100 * fused, 100 * own, delta, acts.c_str(),
                          threshold));
  }
  o.expect(beat >= 2, fmt("(a) fusion beats own st-a by >= 3 points in %zu/3 seeds", beat));
  o.expect(source_dominant >= 2,
           fmt("(b) source activation above 1/N + 0.15 in a majority of layers in %zu/3 seeds", source_dominant));
  return o;
}

Outcome no_op_safety() {
  Outcome o;
  std::size_t safe = 0, own_max = 0;
  for (std::uint64_t seed : kSeeds) {
    const Stage1 st = transfer_stage1(seed);
    const auto f = train_fusion(st.theta, st.members, st.suite.task("kw"), train_cfg(3e-3, 20, seed));
    const double fused = f.record.dev_accuracy.at("kw");
    const double own = st.own_dev.at("kw");
    if (100.0 * (fused - own) >= -2.0) ++safe;
    const std::size_t self = member_index(st.members, "kw");
    std::size_t layers_max = 0, traced = 0;
    std::string acts;
    for (const auto& layer : f.trace.layers) {
      if (layer.empty()) continue;
      ++traced;
      if (std::max_element(layer.begin(), layer.end()) - layer.begin() == static_cast<std::ptrdiff_t>(self)) {
        ++layers_max;
      }
      acts += fmt(" %.3f", layer[self]);
    }
    if (2 * layers_max > traced) ++own_max;
    o.notes.push_back(fmt("  seed %llu: fusion %.2f vs own st-a %.2f; own activation per layer:%s",
                          static_cast<unsigned long long>(seed), 100 * fused, 100 * own, acts.c_str()));
  }
  o.expect(safe == 3, fmt("fusion >= own st-a - 2 points in %zu/3 seeds", safe));
  o.expect(own_max == 3, fmt("own adapter is the row max in a majority of layers in %zu/3 seeds", own_max));
  return o;
}

Outcome mt_pipeline() {
  Outcome o;
  bool all_ok = true, ledger_ok = true;
  for (std::uint64_t seed : kSeeds) {
    const Suite s = make_suite({task("ord", TaskKind::order, 2000), task("kw1", TaskKind::keyword, 1000),
                                task("kw2", TaskKind::keyword, 1000), clone_of("ord_s", "ord", 200)},
                               seed);
    const BackboneParams theta = pretrained(s, seed);
    std::vector<const TaskDataset*> tasks;
    for (const auto& t : s.tasks) tasks.push_back(&t);
    const auto mt = train_mt_adapters(theta, tasks, AdapterConfig::pfeiffer(2), train_cfg(1e-3, 10, seed));
    const BackboneParams theta_prime = mt.theta.clone();
    std::vector<AdapterParams> adapter_copies;
    for (const auto& a : mt.adapters) adapter_copies.push_back(a.clone());
    std::string line = fmt("  seed %llu:", static_cast<unsigned long long>(seed));
    for (const auto& t : s.tasks) {
      const auto f = train_fusion(mt.theta, mt.adapters, t, train_cfg(3e-3, 10, seed));
      const double base = mt.record.dev_accuracy.at(t.spec.name);
      const double fused = f.record.dev_accuracy.at(t.spec.name);
      all_ok = all_ok && 100.0 * (fused - base) >= -2.0;
      ledger_ok = ledger_ok && joined(f.record.changed()) == joined({"fusion", "head:" + t.spec.name});
      line += fmt(" %s %.1f->%.1f", t.spec.name.c_str(), 100 * base, 100 * fused);
    }
    ledger_ok = ledger_ok && bit_equal(mt.theta.params(), theta_prime.params());
    for (std::size_t i = 0; i < mt.adapters.size(); ++i) {
      ledger_ok = ledger_ok && bit_equal(mt.adapters[i].params(), adapter_copies[i].params());
    }
    o.notes.push_back(line + " (mt-a -> fusion w/ mt-a)");
  }
  o.expect(ledger_ok, "stage 2 changes only fusion and head; theta' and every adapter bit-identical");
  o.expect(all_ok, "fusion w/ mt-a >= mt-a - 2 points for every task in every seed");
  return o;
}

Outcome determinism() {
  Outcome o;
  BackboneConfig b = toy_backbone();
  b.hidden_dim = 16;
  b.ffn_dim = 32;
  const Suite s = make_suite({task("a", TaskKind::keyword, 200), task("b", TaskKind::order, 200)}, 6);
  const BackboneParams theta = BackboneParams::init(b, 6);
  const TrainConfig tc = train_cfg(3e-3, 2, 6);
  const AdapterConfig ac = AdapterConfig::houlsby(4);

  auto st1 = train_st_adapter(theta, s.task("a"), ac, tc);
  auto st2 = train_st_adapter(theta, s.task("a"), ac, tc);
  o.expect(st1.record.metrics_json() == st2.record.metrics_json(), "st-a rerun: identical RunRecord metrics");
  auto stb = train_st_adapter(theta, s.task("b"), ac, tc);
  const std::vector<AdapterParams> members{st1.adapter, stb.adapter};
  auto f1 = train_fusion(theta, members, s.task("a"), tc);
  auto f2 = train_fusion(theta, members, s.task("a"), tc);
  o.expect(f1.record.metrics_json() == f2.record.metrics_json() && f1.trace.to_json() == f2.trace.to_json(),
           "fusion rerun: identical RunRecord metrics and trace");
  auto m1 = train_mt_adapters(theta, {&s.task("a"), &s.task("b")}, ac, tc);
  auto m2 = train_mt_adapters(theta, {&s.task("a"), &s.task("b")}, ac, tc);
  o.expect(m1.record.metrics_json() == m2.record.metrics_json(), "mt-a rerun: identical RunRecord metrics");
  auto q1 = train_baseline(theta, {&s.task("a"), &s.task("b")}, BaselineMode::sequential, tc);
  auto q2 = train_baseline(theta, {&s.task("a"), &s.task("b")}, BaselineMode::sequential, tc);
  o.expect(q1.record.metrics_json() == q2.record.metrics_json(), "sequential rerun: identical RunRecord metrics");

  const fs::path dir = fs::temp_directory_path() / "adafuse-acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_backbone(dir / "b.ckpt", m1.theta, nullptr, Json::object());
  serialize_adapter(st1.adapter, Json::object(), dir / "a.ckpt");
  serialize_fusion(f1.psi, Json::object(), dir / "f.ckpt");
  save_head(f1.head, b.fingerprint(), Json::object(), dir / "h.ckpt");
  o.expect(bit_equal(load_backbone(dir / "b.ckpt", &b).params.params(), m1.theta.params()),
           "backbone checkpoint round-trips bit-exactly");
  o.expect(bit_equal(deserialize_adapter(dir / "a.ckpt", b).params(), st1.adapter.params()),
           "adapter checkpoint round-trips bit-exactly");
  o.expect(bit_equal(deserialize_fusion(dir / "f.ckpt", b).params(), f1.psi.params()),
           "fusion checkpoint round-trips bit-exactly");
  o.expect(bit_equal(load_head(dir / "h.ckpt", b).params(), f1.head.params()),
           "head checkpoint round-trips bit-exactly");

  BackboneConfig other = b;
  other.num_layers = 3;
  auto rejects = [&](const std::function<void()>& fn) {
    try {
      fn();
    } catch (const CompatibilityError&) {
      return true;
    } catch (...) {
    }
    return false;
  };
  o.expect(rejects([&] { load_backbone(dir / "b.ckpt", &other); }), "backbone fingerprint mismatch rejected");
  o.expect(rejects([&] { deserialize_adapter(dir / "a.ckpt", other); }), "adapter fingerprint mismatch rejected");
  o.expect(rejects([&] { deserialize_fusion(dir / "f.ckpt", other); }), "fusion fingerprint mismatch rejected");
  o.expect(rejects([&] { load_head(dir / "h.ckpt", other); }), "head fingerprint mismatch rejected");
  fs::remove_all(dir);
  return o;
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;  // 0: no limit
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adafuse acceptance checks"};
  std::vector<int> only;
  bool verbose = false;
  app.add_option("--only", only, "Criterion numbers to run")->delimiter(',');
  app.add_flag("-v,--verbose", verbose, "Print per-check details");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "gradient correctness", 60, gradients},
      {2, "freeze ledger", 120, freeze_ledger},
      {3, "fusion identity embedding", 30, identity_embedding},
      {4, "normalization", 0, normalization},
      {5, "parameter accounting", 10, parameter_accounting},
      {6, "catastrophic forgetting contrast", 300, forgetting},
      {7, "transfer recovery", 600, transfer},
      {8, "no-op safety", 600, no_op_safety},
      {9, "mt-a pipeline", 900, mt_pipeline},
      {10, "determinism and serialization", 0, determinism},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out.expect(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0) out.expect(secs < c.limit_s, fmt("runtime %.1f s < %.0f s", secs, c.limit_s));
    std::printf("%s [%d] %s (%.1f s)\n", out.passed ? "PASS" : "FAIL", c.id, c.name, secs);
    if (verbose || !out.passed) {
      for (const auto& n : out.notes) std::printf("%s\n", n.c_str());
    }
    std::fflush(stdout);
    if (!out.passed) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
