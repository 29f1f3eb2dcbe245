#include "relab/runner.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;

namespace relab {

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::progressive: return "progressive";
    case ExperimentKind::localized: return "localized";
    case ExperimentKind::single_layer: return "single_layer";
    case ExperimentKind::permutation: return "permutation";
    case ExperimentKind::probing: return "probing";
    case ExperimentKind::variant: return "variant";
  }
  return "unknown";
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
  for (auto k : {ExperimentKind::progressive, ExperimentKind::localized, ExperimentKind::single_layer,
                 ExperimentKind::permutation, ExperimentKind::probing, ExperimentKind::variant}) {
    if (to_string(k) == s) return k;
  }
  throw InvalidArgument("unknown experiment kind \"" + s + "\"");
}

// ---------------------------------------------------------------------------
// Manifest

std::size_t ExperimentManifest::trials_for(std::size_t size) const {
  if (auto it = trials_by_size.find(size); it != trials_by_size.end()) return it->second;
  if (size == 500) return 50;
  return trials;
}

IntervalKind ExperimentManifest::interval_kind() const {
  if (interval) return *interval;
  return experiment == ExperimentKind::localized || experiment == ExperimentKind::permutation
             ? IntervalKind::two_sigma
             : IntervalKind::t95;
}

void ExperimentManifest::validate() const {
  if (schema_version != kManifestSchemaVersion) {
    throw InvalidArgument("manifest: unsupported schema_version " + std::to_string(schema_version) +
                          " (expected " + std::to_string(kManifestSchemaVersion) + ")");
  }
  if (tasks.empty()) throw InvalidArgument("manifest: no tasks");
  if (sizes.empty()) throw InvalidArgument("manifest: no sizes");
  if (std::set<Task>(tasks.begin(), tasks.end()).size() != tasks.size()) {
    throw InvalidArgument("manifest: duplicate task");
  }
  if (std::set<std::size_t>(sizes.begin(), sizes.end()).size() != sizes.size()) {
    throw InvalidArgument("manifest: duplicate size");
  }
  for (auto s : sizes) {
    if (s < 2) throw InvalidArgument("manifest: dataset sizes must be at least 2");
    if (trials_for(s) < 1) throw InvalidArgument("manifest: trial counts must be at least 1");
  }
  if (trials < 1) throw InvalidArgument("manifest: trial counts must be at least 1");
  for (const auto& [size, n] : trials_by_size) {
    if (n < 1) throw InvalidArgument("manifest: trial counts must be at least 1");
  }
  if (checkpoint.empty()) throw InvalidArgument("manifest: checkpoint path missing");
  if (data_dir.empty()) throw InvalidArgument("manifest: data_dir missing");
  if (!(learning_rate > 0.0)) throw InvalidArgument("manifest: learning_rate must be positive");
  if (!(reinit_lr_multiplier > 0.0)) throw InvalidArgument("manifest: reinit_lr_multiplier must be positive");
  if (epochs < 1 || batch_size < 1) throw InvalidArgument("manifest: epochs and batch_size must be positive");
  if (probe.epochs < 1 || probe.batch_size < 1 || !(probe.learning_rate > 0.0)) {
    throw InvalidArgument("manifest: invalid probe settings");
  }
  if (experiment == ExperimentKind::permutation && permutations < 1) {
    throw InvalidArgument("manifest: permutations must be at least 1");
  }
  if (block_length < 1) throw InvalidArgument("manifest: block_length must be positive");
}

void to_json(json& j, const ExperimentManifest& m) {
  std::vector<std::string> tasks;
  for (auto t : m.tasks) tasks.push_back(task_name(t));
  json by_size = json::object();
  for (const auto& [size, n] : m.trials_by_size) by_size[std::to_string(size)] = n;
  j = json{{"schema_version", m.schema_version},
           {"experiment", to_string(m.experiment)},
           {"tasks", tasks},
           {"sizes", m.sizes},
           {"trials", m.trials},
           {"trials_by_size", by_size},
           {"master_seed", m.master_seed},
           {"checkpoint", m.checkpoint},
           {"data_dir", m.data_dir},
           {"hyper",
            {{"learning_rate", m.learning_rate},
             {"epochs", m.epochs},
             {"batch_size", m.batch_size},
             {"reinit_lr_multiplier", m.reinit_lr_multiplier},
             {"preserve_layer_norm", m.preserve_layer_norm}}},
           {"probe",
            {{"epochs", m.probe.epochs},
             {"batch_size", m.probe.batch_size},
             {"learning_rate", m.probe.learning_rate}}},
           {"permutations", m.permutations},
           {"block_length", m.block_length},
           {"layers", m.layers},
           {"reference_cells", m.reference_cells},
           {"interval", m.interval ? json(to_string(*m.interval)) : json(nullptr)}};
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ParseError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw InvalidArgument(where + ": unknown field \"" + key + "\"");
  }
}

}  // namespace

void from_json(const json& j, ExperimentManifest& m) {
  reject_unknown(j,
                 {"schema_version", "experiment", "tasks", "sizes", "trials", "trials_by_size", "master_seed",
                  "checkpoint", "data_dir", "hyper", "probe", "permutations", "block_length", "layers",
                  "reference_cells", "interval", "description"},
                 "manifest");
  m = ExperimentManifest{};
  m.schema_version = j.at("schema_version").get<int>();
  m.experiment = experiment_kind_from_string(j.at("experiment").get<std::string>());
  for (const auto& t : j.at("tasks")) m.tasks.push_back(task_from_name(t.get<std::string>()));
  m.sizes = j.at("sizes").get<std::vector<std::size_t>>();
  m.trials = j.value("trials", std::size_t{3});
  if (j.contains("trials_by_size")) {
    for (const auto& [key, value] : j.at("trials_by_size").items()) {
      std::size_t pos = 0;
      const auto size = std::stoull(key, &pos);
      if (pos != key.size()) throw InvalidArgument("manifest: trials_by_size key \"" + key + "\" is not a size");
      m.trials_by_size[size] = value.get<std::size_t>();
    }
  }
  m.master_seed = j.value("master_seed", std::uint64_t{0});
  m.checkpoint = j.at("checkpoint").get<std::string>();
  m.data_dir = j.at("data_dir").get<std::string>();
  if (j.contains("hyper")) {
    const auto& h = j.at("hyper");
    reject_unknown(h, {"learning_rate", "epochs", "batch_size", "reinit_lr_multiplier", "preserve_layer_norm"},
                   "manifest.hyper");
    m.learning_rate = h.value("learning_rate", m.learning_rate);
    m.epochs = h.value("epochs", m.epochs);
    m.batch_size = h.value("batch_size", m.batch_size);
    m.reinit_lr_multiplier = h.value("reinit_lr_multiplier", m.reinit_lr_multiplier);
    m.preserve_layer_norm = h.value("preserve_layer_norm", m.preserve_layer_norm);
  }
  if (j.contains("probe")) {
    const auto& p = j.at("probe");
    reject_unknown(p, {"epochs", "batch_size", "learning_rate"}, "manifest.probe");
    m.probe.epochs = p.value("epochs", m.probe.epochs);
    m.probe.batch_size = p.value("batch_size", m.probe.batch_size);
    m.probe.learning_rate = p.value("learning_rate", m.probe.learning_rate);
  }
  m.permutations = j.value("permutations", m.permutations);
  m.block_length = j.value("block_length", m.block_length);
  m.layers = j.value("layers", std::vector<std::size_t>{});
  m.reference_cells = j.value("reference_cells", m.reference_cells);
  if (j.contains("interval") && !j.at("interval").is_null()) {
    m.interval = interval_kind_from_string(j.at("interval").get<std::string>());
  }
}

ExperimentManifest parse_manifest(const json& j, const fs::path& base_dir) {
  ExperimentManifest m;
  try {
    m = j.get<ExperimentManifest>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
  if (const char* env = std::getenv("RELAB_SEED"); env && *env) {
    const std::string s(env);
    std::size_t pos = 0;
    try {
      m.master_seed = std::stoull(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != s.size() || s.empty() || s[0] == '-') throw InvalidArgument("RELAB_SEED is not a non-negative integer");
  }
  m.validate();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (base_dir / p).lexically_normal().string();
  };
  resolve(m.checkpoint);
  resolve(m.data_dir);
  return m;
}

ExperimentManifest load_manifest(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError("manifest " + path.string() + ": " + e.what());
  }
  return parse_manifest(j, fs::absolute(path).parent_path());
}

std::string manifest_hash(const ExperimentManifest& m) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(json(m).dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Grid

namespace {

std::vector<std::size_t> filtered(const std::vector<std::size_t>& all, const std::vector<std::size_t>& keep,
                                  const std::string& what) {
  if (keep.empty()) return all;
  std::vector<std::size_t> out;
  for (auto v : keep) {
    if (std::find(all.begin(), all.end(), v) == all.end()) {
      throw InvalidArgument("manifest: layers entry " + std::to_string(v) + " is not a valid " + what);
    }
  }
  for (auto v : all) {
    if (std::find(keep.begin(), keep.end(), v) != keep.end()) out.push_back(v);
  }
  return out;
}

std::vector<std::size_t> range(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> v;
  for (auto i = lo; i <= hi; ++i) v.push_back(i);
  return v;
}

}  // namespace

std::vector<Cell> enumerate_cells(const ExperimentManifest& m, std::size_t L) {
  std::vector<Cell> cells;
  for (auto task : m.tasks) {
    for (auto size : m.sizes) {
      const std::string prefix = task_name(task) + "__n" + std::to_string(size) + "__";
      auto add = [&](const std::string& condition, SurgeryPlan plan, std::size_t layer) {
        Cell c;
        c.name = prefix + condition;
        c.task = task;
        c.size = size;
        c.condition = condition;
        plan.preserve_layer_norm = m.preserve_layer_norm;
        c.plan = std::move(plan);
        c.layer = layer;
        c.trials = m.trials_for(size);
        cells.push_back(std::move(c));
        return &cells.back();
      };
      auto references = [&] {
        if (!m.reference_cells) return;
        add("full", SurgeryPlan::progressive(L), L);
        add("scratch", SurgeryPlan::progressive(0), 0);
      };
      switch (m.experiment) {
        case ExperimentKind::progressive:
        case ExperimentKind::variant: {
          const std::string stem = m.experiment == ExperimentKind::variant ? "variant-k" : "progressive-k";
          for (auto k : filtered(range(0, L), m.layers, "k")) {
            add(stem + std::to_string(k), SurgeryPlan::progressive(k), k);
          }
          break;
        }
        case ExperimentKind::localized:
          references();
          for (auto s : filtered(block_starts(L, m.block_length), m.layers, "block start")) {
            add("block-reinit-s" + std::to_string(s), SurgeryPlan::block_reinit(s, 0, m.block_length), s);
            add("block-preserve-s" + std::to_string(s), SurgeryPlan::block_preserve(s, 0, m.block_length), s);
          }
          break;
        case ExperimentKind::single_layer:
          for (auto k : filtered(range(1, L), m.layers, "layer")) {
            add("single-k" + std::to_string(k), SurgeryPlan::single_layer(k), k);
          }
          break;
        case ExperimentKind::permutation:
          references();
          for (std::size_t n = 0; n < m.permutations; ++n) {
            auto* c = add("perm-n" + std::to_string(n),
                          SurgeryPlan::permute(derive_permutation(m.master_seed, n, L)), 0);
            c->permutation_index = n;
          }
          break;
        case ExperimentKind::probing:
          for (auto l : filtered(range(0, L), m.layers, "layer")) {
            auto* c = add("probe-l" + std::to_string(l), SurgeryPlan::identity(), l);
            c->probe = true;
          }
          break;
      }
    }
  }
  return cells;
}

std::uint64_t trial_seed(std::uint64_t master_seed, const std::string& cell, std::size_t trial) {
  return derive_seed(master_seed, "trial/" + cell + "/" + std::to_string(trial));
}

// ---------------------------------------------------------------------------
// Files

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed for " + path.string());
  return ss.str();
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

namespace {

fs::path trial_path(const fs::path& store, const Cell& c, std::size_t trial) {
  return store / c.name / ("trial-" + std::to_string(trial) + ".json");
}

std::size_t expected_epochs(const ExperimentManifest& m, const Cell& c) {
  if (c.probe) return m.probe.epochs;
  FinetuneHyper h;
  h.epochs = m.epochs;
  return effective_epochs(h, c.size);
}

// Parses and checks a stored record; nullopt when it is unusable.
std::optional<TrialRecord> read_record(const fs::path& path, const ExperimentManifest& m, const Cell& c,
                                       std::size_t trial) {
  try {
    auto rec = json::parse(read_file(path)).get<TrialRecord>();
    rec.validate(expected_epochs(m, c));
    if (rec.cell != c.name || rec.trial_index != trial || rec.size != c.size || rec.task != task_name(c.task)) {
      return std::nullopt;
    }
    return rec;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

fs::path quarantine(const fs::path& store, const fs::path& file, const std::string& label) {
  const auto dir = store / "quarantine";
  fs::create_directories(dir);
  fs::path dest = dir / label;
  for (int i = 1; fs::exists(dest); ++i) dest = dir / (label + "." + std::to_string(i));
  fs::rename(file, dest);
  return dest;
}

std::string record_text(const TrialRecord& rec) { return json(rec).dump(2) + "\n"; }

struct FeatureCache {
  std::mutex mutex;
  std::map<std::string, std::shared_future<std::shared_ptr<const ProbeFeatures>>> entries;

  std::shared_ptr<const ProbeFeatures> get(const std::string& key,
                                           const std::function<ProbeFeatures()>& compute) {
    std::promise<std::shared_ptr<const ProbeFeatures>> promise;
    std::shared_future<std::shared_ptr<const ProbeFeatures>> future;
    bool owner = false;
    {
      std::lock_guard lock(mutex);
      auto it = entries.find(key);
      if (it == entries.end()) {
        future = promise.get_future().share();
        entries.emplace(key, future);
        owner = true;
      } else {
        future = it->second;
      }
    }
    if (owner) {
      try {
        promise.set_value(std::make_shared<const ProbeFeatures>(compute()));
      } catch (...) {
        promise.set_exception(std::current_exception());
      }
    }
    return future.get();
  }
};

json index_json(const ExperimentManifest& m, const std::string& hash, std::size_t L, const std::vector<Cell>& cells,
                const std::map<std::string, std::size_t>& complete, const std::vector<std::string>& skipped) {
  json jc = json::object();
  for (const auto& c : cells) {
    const auto it = complete.find(c.name);
    jc[c.name] = {{"task", task_name(c.task)},
                  {"size", c.size},
                  {"condition", c.condition},
                  {"trials_expected", c.trials},
                  {"trials_complete", it == complete.end() ? 0 : it->second}};
  }
  return json{{"manifest_hash", hash},
              {"experiment", to_string(m.experiment)},
              {"num_layers", L},
              {"cells", jc},
              {"skipped", skipped}};
}

}  // namespace

RunSummary run_manifest(const ExperimentManifest& m, const RunOptions& options) {
  m.validate();
  if (options.out.empty()) throw InvalidArgument("run: output directory missing");
  if (!fs::exists(m.checkpoint)) throw IoError("run: checkpoint " + m.checkpoint + " does not exist");
  if (!fs::is_directory(m.data_dir)) throw IoError("run: data directory " + m.data_dir + " does not exist");
  const Checkpoint pretrained = load_checkpoint(m.checkpoint);
  const auto before = checksum(pretrained);
  const std::size_t L = pretrained.config.num_layers;
  const auto cells = enumerate_cells(m, L);

  RunSummary summary;
  summary.manifest_hash = manifest_hash(m);
  summary.store_dir = options.out / "runs" / summary.manifest_hash;
  const auto& store = summary.store_dir;
  fs::create_directories(store);
  write_file_atomic(store / "manifest.json", json(m).dump(2) + "\n");
  auto log = [&](const std::string& line) {
    if (options.log) options.log(line);
  };

  std::map<Task, TaskDataset> pools;
  for (auto t : m.tasks) pools.emplace(t, load_dataset(m.data_dir, t));

  struct Work {
    const Cell* cell;
    std::size_t trial;
  };
  std::vector<Work> pending;
  std::map<std::string, std::size_t> complete;
  for (const auto& c : cells) {
    const auto available = pools.at(c.task).train.size();
    if (c.size > available) {
      summary.skipped_cells.push_back(c.name + ": size " + std::to_string(c.size) + " exceeds the " +
                                      std::to_string(available) + " available training examples");
      continue;
    }
    for (std::size_t i = 0; i < c.trials; ++i) {
      const auto path = trial_path(store, c, i);
      auto tmp = path;
      tmp += ".tmp";
      if (fs::exists(tmp)) {
        quarantine(store, tmp, c.name + "__trial-" + std::to_string(i) + ".json.tmp");
        ++summary.quarantined;
      }
      if (fs::exists(path) && !options.force) {
        if (read_record(path, m, c, i)) {
          ++complete[c.name];
          ++summary.reused;
          continue;
        }
        quarantine(store, path, c.name + "__trial-" + std::to_string(i) + ".json");
        ++summary.quarantined;
        log("quarantined unreadable record " + path.string());
      }
      pending.push_back({&c, i});
    }
  }
  // Trials that share probe features run next to each other.
  std::stable_sort(pending.begin(), pending.end(), [](const Work& a, const Work& b) {
    return std::tie(a.cell->task, a.cell->size, a.trial) < std::tie(b.cell->task, b.cell->size, b.trial);
  });

  FeatureCache features;
  std::mutex done_mutex;
  std::ofstream timings;
  fs::create_directories(options.out / "logs");
  timings.open(options.out / "logs" / (summary.manifest_hash + ".timings.jsonl"), std::ios::app);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;

  auto execute = [&](const Work& w) {
    const Cell& c = *w.cell;
    const auto seed = trial_seed(m.master_seed, c.name, w.trial);
    const auto& pool = pools.at(c.task);
    TrialRecord rec;
    if (c.probe) {
      const std::string key = task_name(c.task) + "/" + std::to_string(c.size) + "/" + std::to_string(w.trial);
      auto f = features.get(key, [&] { return probe_features(pretrained, subsample(pool, c.size, w.trial, m.master_seed)); });
      rec = probe_with_features(*f, c.layer, c.task, seed, m.probe);
    } else {
      SurgeryPlan plan = c.plan;
      plan.seed = derive_seed(seed, "surgery");
      const auto surgery = apply_surgery(pretrained, plan);
      FinetuneHyper h;
      h.learning_rate = m.learning_rate;
      h.epochs = m.epochs;
      h.batch_size = m.batch_size;
      h.reinit_lr_multiplier = m.reinit_lr_multiplier;
      h.seed = seed;
      rec = finetune(surgery.checkpoint, surgery.report, subsample(pool, c.size, w.trial, m.master_seed), h);
      rec.plan = plan;
      rec.seeds["surgery"] = plan.seed;
    }
    rec.cell = c.name;
    rec.trial_index = w.trial;
    rec.seeds["subsample"] = derive_seed(m.master_seed, "subsample/" + task_name(c.task) + "/" +
                                                            std::to_string(c.size) + "/" + std::to_string(w.trial));
    write_file_atomic(trial_path(store, c, w.trial), record_text(rec));
    std::lock_guard lock(done_mutex);
    ++complete[c.name];
    ++summary.executed;
    timings << json{{"cell", c.name}, {"trial", w.trial}, {"seconds", rec.wall_clock_seconds}}.dump() << "\n";
    timings.flush();
    char line[256];
    std::snprintf(line, sizeof line, "[%zu/%zu] %s trial %zu: accuracy %.4f mcc %.4f (%.1fs)", summary.executed,
                  pending.size(), c.name.c_str(), w.trial, rec.accuracy, rec.matthews, rec.wall_clock_seconds);
    log(line);
  };

  auto worker = [&] {
    while (!failed) {
      const auto i = next.fetch_add(1);
      if (i >= pending.size()) return;
      try {
        execute(pending[i]);
      } catch (...) {
        std::lock_guard lock(done_mutex);
        if (!failed.exchange(true)) error = std::current_exception();
      }
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, pending.size()));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < jobs; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (error) std::rethrow_exception(error);
  if (checksum(pretrained) != before) throw NumericError("run: pretrained checkpoint changed during the run");

  write_file_atomic(store / "index.json",
                    index_json(m, summary.manifest_hash, L, cells, complete, summary.skipped_cells).dump(2) + "\n");
  return summary;
}

std::vector<StoredRun> load_store(const fs::path& root) {
  const auto runs = root / "runs";
  if (!fs::is_directory(runs)) throw IoError("store " + root.string() + " has no runs directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(runs)) {
    if (e.is_directory() && fs::exists(e.path() / "manifest.json") && fs::exists(e.path() / "index.json")) {
      dirs.push_back(e.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<StoredRun> out;
  for (const auto& dir : dirs) {
    StoredRun run;
    run.dir = dir;
    run.hash = dir.filename().string();
    json index;
    try {
      run.manifest = json::parse(read_file(dir / "manifest.json")).get<ExperimentManifest>();
      index = json::parse(read_file(dir / "index.json"));
    } catch (const json::exception& e) {
      throw ParseError("store " + dir.string() + ": " + e.what());
    }
    run.cells = enumerate_cells(run.manifest, index.at("num_layers").get<std::size_t>());
    run.skipped = index.at("skipped").get<std::vector<std::string>>();
    std::set<std::string> skipped_names;
    for (const auto& s : run.skipped) skipped_names.insert(s.substr(0, s.find(':')));
    for (const auto& c : run.cells) {
      if (skipped_names.count(c.name)) continue;
      auto& recs = run.records[c.name];
      for (std::size_t i = 0; i < c.trials; ++i) {
        if (auto rec = read_record(trial_path(dir, c, i), run.manifest, c, i)) {
          recs.push_back(std::move(*rec));
        } else {
          run.missing.push_back(c.name + "/trial-" + std::to_string(i));
        }
      }
    }
    out.push_back(std::move(run));
  }
  return out;
}

}  // namespace relab
