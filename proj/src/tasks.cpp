// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>

#include "adafuse/error.hpp"
#include "adafuse/rng.hpp"

namespace adafuse {

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::keyword: return "keyword";
    case TaskKind::parity: return "parity";
    case TaskKind::order: return "order";
    case TaskKind::clone: return "clone";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& text) {
  for (auto k : {TaskKind::keyword, TaskKind::parity, TaskKind::order, TaskKind::clone}) {
    if (to_string(k) == text) return k;
  }
  throw ConfigError("unknown task kind '" + text + "'");
}

std::string to_string(SplitKind kind) {
  switch (kind) {
    case SplitKind::train: return "train";
    case SplitKind::dev: return "dev";
    case SplitKind::test: return "test";
  }
  return "?";
}

// ---- configuration ----

Json TaskSpec::to_json() const {
  Json links_json = Json::object();
  for (const auto& l : links) links_json[l.task] = l.overlap;
  Json j{{"name", name},
         {"kind", to_string(kind)},
         {"classes", num_classes},
         {"markers_per_class", markers_per_class},
         {"max_markers", max_markers},
         {"sizes", {{"train", train_size}, {"dev", dev_size}, {"test", test_size}}},
         {"links", links_json},
         {"seed", seed}};
  if (!markers.empty()) j["markers"] = markers;
  return j;
}

TaskSpec TaskSpec::from_json(const Json& j, const std::string& path) {
  JsonReader r(j, path);
  TaskSpec t;
  t.name = r.require<std::string>("name");
  try {
    t.kind = parse_task_kind(r.require<std::string>("kind"));
  } catch (const ConfigError& e) {
    if (std::string(e.what()).find(path) == 0) throw;
    throw ConfigError(r.field("kind") + ": " + e.what());
  }
  t.num_classes = r.get("classes", t.num_classes);
  t.markers_per_class = r.get("markers_per_class", t.markers_per_class);
  t.markers = r.get("markers", t.markers);
  t.max_markers = r.get("max_markers", t.max_markers);
  if (r.has("sizes")) {
    JsonReader s(r.raw("sizes"), r.field("sizes"));
    t.train_size = s.get("train", t.train_size);
    t.dev_size = s.get("dev", t.dev_size);
    t.test_size = s.get("test", t.test_size);
    s.finish();
  }
  if (r.has("links")) {
    const Json& links = r.raw("links");
    if (!links.is_object()) throw ConfigError(r.field("links") + ": expected an object");
    for (const auto& [name, value] : links.items()) {
      if (!value.is_number()) throw ConfigError(r.field("links") + "." + name + ": wrong type");
      t.links.push_back({name, value.get<double>()});
    }
  }
  t.seed = r.get("seed", t.seed);
  r.finish();
  return t;
}

void VocabConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(kFirstRegularToken)) {
    throw ConfigError("vocab_size must exceed the reserved tokens");
  }
  if (min_len < 2 || max_len < min_len) throw ConfigError("need 2 <= min_len <= max_len");
}

Json VocabConfig::to_json() const {
  return Json{{"vocab_size", vocab_size}, {"min_len", min_len}, {"max_len", max_len}};
}

VocabConfig VocabConfig::from_json(const Json& j, const std::string& path) {
  JsonReader r(j, path);
  VocabConfig v;
  v.vocab_size = r.get("vocab_size", v.vocab_size);
  v.min_len = r.get("min_len", v.min_len);
  v.max_len = r.get("max_len", v.max_len);
  r.finish();
  try {
    v.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return v;
}

SuiteConfig SuiteConfig::default_suite() {
  SuiteConfig s;
  auto task = [](std::string name, TaskKind kind, std::size_t train) {
    TaskSpec t;
    t.name = std::move(name);
    t.kind = kind;
    t.train_size = train;
    t.dev_size = 200;
    t.test_size = 200;
    return t;
  };
  s.tasks.push_back(task("kw_large", TaskKind::keyword, 4000));
  s.tasks.push_back(task("order_large", TaskKind::order, 4000));
  s.tasks.back().markers_per_class = 2;
  s.tasks.push_back(task("kw_medium", TaskKind::keyword, 1000));
  s.tasks.back().links.push_back({"kw_large", 0.5});
  s.tasks.push_back(task("parity_medium", TaskKind::parity, 1000));
  s.tasks.back().markers_per_class = 1;
  s.tasks.back().max_markers = 3;
  s.tasks.push_back(task("kw_small", TaskKind::clone, 200));
  s.tasks.back().links.push_back({"kw_large", 1.0});
  s.tasks.push_back(task("order_small", TaskKind::clone, 200));
  s.tasks.back().links.push_back({"order_large", 0.0});
  return s;
}

Json SuiteConfig::to_json() const {
  Json tasks_json = Json::array();
  for (const auto& t : tasks) tasks_json.push_back(t.to_json());
  return Json{{"vocab", vocab.to_json()}, {"tasks", tasks_json}, {"corpus_size", corpus_size}};
}

SuiteConfig SuiteConfig::from_json(const Json& j, const std::string& path) {
  JsonReader r(j, path);
  SuiteConfig s;
  if (r.has("vocab")) s.vocab = VocabConfig::from_json(r.raw("vocab"), r.field("vocab"));
  const Json& tasks = r.raw("tasks");
  if (!tasks.is_array() || tasks.empty()) {
    throw ConfigError(r.field("tasks") + ": expected a nonempty array");
  }
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    s.tasks.push_back(TaskSpec::from_json(tasks[i], r.field("tasks") + "[" + std::to_string(i) + "]"));
  }
  s.corpus_size = r.get("corpus_size", s.corpus_size);
  r.finish();
  return s;
}

// ---- splits ----

std::vector<std::vector<int>> InstanceSet::sequences() const {
  std::vector<std::vector<int>> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.tokens);
  return out;
}

std::vector<std::size_t> InstanceSet::class_histogram(std::size_t num_classes) const {
  std::vector<std::size_t> h(num_classes, 0);
  for (const auto& it : items) {
    if (it.label < 0 || static_cast<std::size_t>(it.label) >= num_classes) {
      throw DataError("label " + std::to_string(it.label) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    }
    ++h[it.label];
  }
  return h;
}

const TaskDataset& Suite::task(const std::string& name) const {
  for (const auto& t : tasks) {
    if (t.spec.name == name) return t;
  }
  throw UsageError("suite has no task '" + name + "'");
}

std::vector<std::string> Suite::names() const {
  std::vector<std::string> out;
  for (const auto& t : tasks) out.push_back(t.spec.name);
  return out;
}

SplitResult split_by_sizes(std::vector<Instance> pool, std::array<std::size_t, 3> sizes,
                           std::size_t num_classes, std::uint64_t seed) {
  const std::size_t n = pool.size();
  if (sizes[0] + sizes[1] + sizes[2] != n) {
    throw UsageError("split sizes do not add up to the pool size " + std::to_string(n));
  }
  for (std::size_t s : sizes) {
    if (s < num_classes) {
      throw DataError("split of size " + std::to_string(s) + " is smaller than the class count " +
                      std::to_string(num_classes));
    }
  }
  std::vector<std::vector<Instance>> by_class(num_classes);
  for (auto& it : pool) {
    if (it.label < 0 || static_cast<std::size_t>(it.label) >= num_classes) {
      throw DataError("label " + std::to_string(it.label) + " outside the class range");
    }
    by_class[it.label].push_back(std::move(it));
  }
  Rng rng(derive_seed(seed, "data/split"));
  // Integer share of each class per split, remainders handed to splits that
  // are still short of their target.
  std::array<std::vector<Instance>, 3> out;
  std::array<std::size_t, 3> filled{0, 0, 0};
  std::vector<std::array<std::size_t, 3>> alloc(num_classes);
  std::vector<std::array<std::size_t, 3>> rem(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (int s = 0; s < 3; ++s) {
      const std::size_t num = by_class[c].size() * sizes[s];
      alloc[c][s] = num / n;
      rem[c][s] = num % n;
      filled[s] += alloc[c][s];
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t left = by_class[c].size() - alloc[c][0] - alloc[c][1] - alloc[c][2];
    while (left > 0) {
      int best = -1;
      for (int s = 0; s < 3; ++s) {
        if (filled[s] >= sizes[s]) continue;
        if (best < 0 || rem[c][s] > rem[c][best]) best = s;
      }
      if (best < 0) best = 0;
      ++alloc[c][best];
      ++filled[best];
      rem[c][best] = 0;
      --left;
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& items = by_class[c];
    rng.shuffle(std::span<Instance>(items));
    std::size_t at = 0;
    for (int s = 0; s < 3; ++s) {
      for (std::size_t k = 0; k < alloc[c][s]; ++k) out[s].push_back(std::move(items[at++]));
    }
  }
  for (auto& v : out) rng.shuffle(std::span<Instance>(v));
  return {TrainSplit(std::move(out[0])), DevSplit(std::move(out[1])), TestSplit(std::move(out[2]))};
}

SplitResult split(std::vector<Instance> pool, std::array<double, 3> fractions,
                  std::size_t num_classes, std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  for (double f : fractions) {
    if (f < 0.0) throw UsageError("split fractions must be non-negative");
  }
  if (std::abs(total - 1.0) > 1e-9) throw UsageError("split fractions must sum to 1");
  const std::size_t n = pool.size();
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = fractions[s] * static_cast<double>(n);
    sizes[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[s] = exact - static_cast<double>(sizes[s]);
    assigned += sizes[s];
  }
  while (assigned < n) {
    int best = static_cast<int>(std::max_element(frac.begin(), frac.end()) - frac.begin());
    ++sizes[best];
    frac[best] = -1.0;
    ++assigned;
  }
  return split_by_sizes(std::move(pool), sizes, num_classes, seed);
}

std::vector<Batch> ordered_batches(const InstanceSet& split, std::size_t batch_size) {
  if (batch_size == 0) throw UsageError("batch_size must be >= 1");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < split.size(); i += batch_size) {
    std::vector<const std::vector<int>*> seqs;
    Batch b;
    for (std::size_t k = i; k < std::min(split.size(), i + batch_size); ++k) {
      seqs.push_back(&split.items[k].tokens);
      b.labels.push_back(split.items[k].label);
    }
    b.tokens = TokenBatch::pack(seqs);
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<Batch> batches(const InstanceSet& split, std::size_t batch_size, std::uint64_t seed,
                           std::size_t epoch) {
  if (batch_size == 0) throw UsageError("batch_size must be >= 1");
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "data/epoch/" + std::to_string(epoch)));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<Batch> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    std::vector<const std::vector<int>*> seqs;
    Batch b;
    for (std::size_t k = i; k < std::min(order.size(), i + batch_size); ++k) {
      seqs.push_back(&split.items[order[k]].tokens);
      b.labels.push_back(split.items[order[k]].label);
    }
    b.tokens = TokenBatch::pack(seqs);
    out.push_back(std::move(b));
  }
  return out;
}

void export_ldjson(const InstanceSet& split, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    for (const auto& it : split.items) {
      out << Json{{"tokens", it.tokens}, {"label", it.label}}.dump() << '\n';
    }
  }
  std::filesystem::rename(tmp, path);
}

std::vector<Instance> import_ldjson(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Instance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      Json j = Json::parse(line);
      out.push_back({j.at("tokens").get<std::vector<int>>(), j.at("label").get<int>()});
    } catch (const Json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- generation ----

namespace {

struct Resolved {
  const TaskSpec* spec;
  TaskKind semantics;
  std::size_t classes;
  std::size_t per_class;
  std::size_t max_markers;
  std::vector<std::vector<int>> markers;
  std::vector<int> filler;
};

std::size_t markers_needed(TaskKind kind, std::size_t classes) {
  return kind == TaskKind::keyword ? classes : 2;
}

void check_spec(const TaskSpec& t, const VocabConfig& v, const std::string& where) {
  if (t.name.empty()) throw ConfigError(where + ".name: must not be empty");
  if (t.kind != TaskKind::clone) {
    if (t.num_classes < 2) throw ConfigError(where + ".classes: need at least 2 classes");
    if ((t.kind == TaskKind::parity || t.kind == TaskKind::order) && t.num_classes != 2) {
      throw ConfigError(where + ".classes: " + to_string(t.kind) + " tasks have exactly 2 classes");
    }
    if (t.markers_per_class < 1) throw ConfigError(where + ".markers_per_class: must be >= 1");
    if (t.max_markers < 1) throw ConfigError(where + ".max_markers: must be >= 1");
    if (t.max_markers > v.min_len - 1) {
      throw ConfigError(where + ".max_markers: exceeds the shortest sequence (min_len - 1)");
    }
    if (t.kind == TaskKind::order && v.min_len < 3) {
      throw ConfigError(where + ": order tasks need min_len >= 3");
    }
  } else if (t.links.size() != 1) {
    throw ConfigError(where + ".links: a clone task links exactly one source task");
  }
  for (const auto& l : t.links) {
    if (!(l.overlap >= 0.0 && l.overlap <= 1.0)) {
      throw ConfigError(where + ".links." + l.task + ": overlap must be in [0, 1]");
    }
  }
  for (int m : t.markers) {
    if (m < kFirstRegularToken) {
      throw ConfigError(where + ".markers: token " + std::to_string(m) +
                        " collides with a reserved token");
    }
    if (static_cast<std::size_t>(m) >= v.vocab_size) {
      throw ConfigError(where + ".markers: token " + std::to_string(m) + " outside the vocabulary");
    }
  }
}

// Tasks in an order where every linked task comes first.
std::vector<std::size_t> dependency_order(const SuiteConfig& config) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < config.tasks.size(); ++i) {
    if (!index.emplace(config.tasks[i].name, i).second) {
      throw ConfigError("$.suite.tasks: duplicate task name '" + config.tasks[i].name + "'");
    }
  }
  for (std::size_t i = 0; i < config.tasks.size(); ++i) {
    for (const auto& l : config.tasks[i].links) {
      if (!index.contains(l.task)) {
        throw ConfigError("$.suite.tasks[" + std::to_string(i) + "].links: unknown task '" + l.task + "'");
      }
    }
  }
  std::vector<int> state(config.tasks.size(), 0);
  std::vector<std::size_t> order;
  std::function<void(std::size_t)> visit = [&](std::size_t i) {
    if (state[i] == 2) return;
    if (state[i] == 1) throw ConfigError("$.suite.tasks: cyclic links through '" + config.tasks[i].name + "'");
    state[i] = 1;
    for (const auto& l : config.tasks[i].links) visit(index.at(l.task));
    state[i] = 2;
    order.push_back(i);
  };
  for (std::size_t i = 0; i < config.tasks.size(); ++i) visit(i);
  return order;
}

std::vector<int> make_tokens(const Resolved& r, int label, const VocabConfig& v, Rng& rng) {
  const std::size_t len = v.min_len + rng.below(v.max_len - v.min_len + 1);
  std::vector<int> tokens(len);
  tokens[0] = kClsToken;
  for (std::size_t i = 1; i < len; ++i) tokens[i] = r.filler[rng.below(r.filler.size())];
  std::vector<std::size_t> pos(len - 1);
  std::iota(pos.begin(), pos.end(), 1);
  rng.shuffle(std::span<std::size_t>(pos));
  auto pick = [&](const std::vector<int>& set) { return set[rng.below(set.size())]; };
  switch (r.semantics) {
    case TaskKind::keyword: {
      const std::size_t n = 1 + rng.below(r.max_markers);
      for (std::size_t k = 0; k < n; ++k) tokens[pos[k]] = pick(r.markers[label]);
      break;
    }
    case TaskKind::parity: {
      std::vector<std::size_t> counts;
      for (std::size_t c = 0; c <= r.max_markers; ++c) {
        if (static_cast<int>(c % 2) == label) counts.push_back(c);
      }
      const std::size_t n = counts[rng.below(counts.size())];
      std::vector<int> all;
      for (const auto& m : r.markers) all.insert(all.end(), m.begin(), m.end());
      for (std::size_t k = 0; k < n; ++k) tokens[pos[k]] = pick(all);
      break;
    }
    case TaskKind::order: {
      const std::size_t p = std::min(pos[0], pos[1]), q = std::max(pos[0], pos[1]);
      tokens[p] = pick(r.markers[label == 0 ? 0 : 1]);
      tokens[q] = pick(r.markers[label == 0 ? 1 : 0]);
      break;
    }
    case TaskKind::clone:
      throw UsageError("unresolved clone task");
  }
  return tokens;
}

}  // namespace

int label_of(const TaskDataset& task, const std::vector<int>& tokens) {
  auto marker_class = [&](int tok) -> int {
    for (std::size_t c = 0; c < task.class_markers.size(); ++c) {
      const auto& m = task.class_markers[c];
      if (std::find(m.begin(), m.end(), tok) != m.end()) return static_cast<int>(c);
    }
    return -1;
  };
  switch (task.semantics) {
    case TaskKind::keyword:
      for (int t : tokens) {
        if (int c = marker_class(t); c >= 0) return c;
      }
      return -1;
    case TaskKind::parity: {
      int n = 0;
      for (int t : tokens) n += marker_class(t) >= 0;
      return n % 2;
    }
    case TaskKind::order:
      for (int t : tokens) {
        if (int c = marker_class(t); c >= 0) return c;
      }
      return -1;
    case TaskKind::clone:
      break;
  }
  return -1;
}

Suite generate_suite(const SuiteConfig& config, std::uint64_t seed) {
  config.vocab.validate();
  if (config.tasks.empty()) throw ConfigError("$.suite.tasks: expected at least one task");
  for (std::size_t i = 0; i < config.tasks.size(); ++i) {
    check_spec(config.tasks[i], config.vocab, "$.suite.tasks[" + std::to_string(i) + "]");
  }
  const auto order = dependency_order(config);

  // Fresh markers come from one shuffled stream of regular tokens, so tasks
  // without links never share a marker.
  Rng marker_rng(derive_seed(seed, "data/markers"));
  std::vector<int> fresh;
  for (std::size_t t = kFirstRegularToken; t < config.vocab.vocab_size; ++t) fresh.push_back(static_cast<int>(t));
  std::set<int> used;
  for (const auto& t : config.tasks) used.insert(t.markers.begin(), t.markers.end());
  std::erase_if(fresh, [&](int t) { return used.contains(t); });
  marker_rng.shuffle(std::span<int>(fresh));
  std::size_t fresh_at = 0;
  auto next_fresh = [&](const std::string& task) {
    if (fresh_at >= fresh.size()) {
      throw ConfigError("vocabulary of " + std::to_string(config.vocab.vocab_size) +
                        " tokens has too few free markers for task '" + task + "'");
    }
    return fresh[fresh_at++];
  };

  std::vector<Resolved> resolved(config.tasks.size());
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < config.tasks.size(); ++i) index[config.tasks[i].name] = i;
  for (std::size_t i : order) {
    const TaskSpec& t = config.tasks[i];
    Resolved& r = resolved[i];
    r.spec = &t;
    if (t.kind == TaskKind::clone) {
      const Resolved& src = resolved[index.at(t.links[0].task)];
      r.semantics = src.semantics;
      r.classes = src.classes;
      r.per_class = src.per_class;
      r.max_markers = src.max_markers;
    } else {
      r.semantics = t.kind;
      r.classes = t.num_classes;
      r.per_class = t.markers_per_class;
      r.max_markers = t.max_markers;
    }
    const std::size_t groups = markers_needed(r.semantics, r.classes);
    r.markers.assign(groups, {});
    if (!t.markers.empty()) {
      if (t.markers.size() != groups * r.per_class) {
        throw ConfigError("$.suite.tasks[" + std::to_string(i) + "].markers: expected " +
                          std::to_string(groups * r.per_class) + " markers");
      }
      for (std::size_t g = 0; g < groups; ++g) {
        r.markers[g].assign(t.markers.begin() + g * r.per_class, t.markers.begin() + (g + 1) * r.per_class);
      }
    } else {
      // Linked tasks copy round(overlap * k) markers per group from the
      // source (first link wins for a given slot); the rest are fresh.
      for (std::size_t g = 0; g < groups; ++g) {
        for (const auto& l : t.links) {
          const Resolved& src = resolved[index.at(l.task)];
          if (src.markers.empty()) continue;
          const auto& sg = src.markers[g % src.markers.size()];
          const auto share = static_cast<std::size_t>(std::llround(l.overlap * static_cast<double>(r.per_class)));
          for (std::size_t k = 0; k < std::min(share, sg.size()) && r.markers[g].size() < r.per_class; ++k) {
            if (std::find(r.markers[g].begin(), r.markers[g].end(), sg[k]) == r.markers[g].end()) {
              r.markers[g].push_back(sg[k]);
            }
          }
        }
        while (r.markers[g].size() < r.per_class) r.markers[g].push_back(next_fresh(t.name));
      }
    }
    std::set<int> own;
    for (const auto& g : r.markers) own.insert(g.begin(), g.end());
    if (own.size() != groups * r.per_class) {
      throw ConfigError("task '" + t.name + "' has repeated markers across classes");
    }
    for (std::size_t tok = kFirstRegularToken; tok < config.vocab.vocab_size; ++tok) {
      if (!own.contains(static_cast<int>(tok))) r.filler.push_back(static_cast<int>(tok));
    }
    if (r.filler.empty()) throw ConfigError("task '" + t.name + "' leaves no filler tokens");
  }

  Suite suite;
  suite.vocab = config.vocab;
  for (std::size_t i = 0; i < config.tasks.size(); ++i) {
    const TaskSpec& t = config.tasks[i];
    const Resolved& r = resolved[i];
    Rng rng(derive_seed(seed + t.seed, "data/task/" + t.name));
    const std::size_t n = t.train_size + t.dev_size + t.test_size;
    std::vector<Instance> pool;
    std::set<std::vector<int>> seen;
    std::size_t attempts = 0;
    const std::size_t limit = 100 * n + 10000;
    for (std::size_t c = 0; c < r.classes; ++c) {
      const std::size_t quota = n / r.classes + (c < n % r.classes ? 1 : 0);
      for (std::size_t k = 0; k < quota;) {
        if (++attempts > limit) {
          throw DataError("task '" + t.name + "': cannot draw " + std::to_string(n) +
                          " distinct sequences; enlarge the vocabulary or lengths");
        }
        auto tokens = make_tokens(r, static_cast<int>(c), config.vocab, rng);
        if (!seen.insert(tokens).second) continue;
        pool.push_back({std::move(tokens), static_cast<int>(c)});
        ++k;
      }
    }
    auto parts = split_by_sizes(std::move(pool), {t.train_size, t.dev_size, t.test_size}, r.classes,
                                derive_seed(seed + t.seed, t.name));
    TaskDataset ds;
    ds.spec = t;
    ds.semantics = r.semantics;
    ds.num_classes = r.classes;
    ds.class_markers = r.markers;
    ds.train = std::move(parts.train);
    ds.dev = std::move(parts.dev);
    ds.test = std::move(parts.test);
    suite.tasks.push_back(std::move(ds));
  }

  Rng corpus_rng(derive_seed(seed, "data/corpus"));
  for (std::size_t i = 0; i < config.corpus_size; ++i) {
    const Resolved& r = resolved[i % resolved.size()];
    const int label = static_cast<int>(corpus_rng.below(r.classes));
    suite.corpus.push_back(make_tokens(r, label, config.vocab, corpus_rng));
  }
  return suite;
}

}  // namespace adafuse
