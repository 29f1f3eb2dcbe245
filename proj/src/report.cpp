#include "relab/report.hpp"

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace relab {

std::string metric_name(Task task) { return task == Task::toy_accept ? "matthews" : "accuracy"; }

double primary_metric(Task task, const TrialRecord& record) {
  return task == Task::toy_accept ? record.matthews : record.accuracy;
}

namespace {

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

std::string exact(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

class Csv {
 public:
  explicit Csv(std::vector<std::string> header) : columns_(header.size()) { row(header); }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_) throw InvalidArgument("csv: row width does not match header");
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << "\n";
  }
  std::string str() const { return out_.str(); }

 private:
  std::size_t columns_;
  std::ostringstream out_;
};

struct Aggregate {
  std::vector<double> values;
  std::optional<IntervalEstimate> interval;  // n >= 2 only

  double mean() const { return sample_mean(values); }
};

Aggregate aggregate(const std::vector<TrialRecord>& records, Task task, IntervalKind kind) {
  Aggregate a;
  for (const auto& r : records) a.values.push_back(primary_metric(task, r));
  if (a.values.size() >= 2) a.interval = t_interval(a.values, kind);
  return a;
}

// mean, ci_low, ci_high, n, interval
std::vector<std::string> stat_cells(const Aggregate& a, IntervalKind kind) {
  if (a.values.empty()) return {"", "", "", "0", to_string(kind)};
  if (!a.interval) return {num(a.mean()), "", "", std::to_string(a.values.size()), to_string(kind)};
  return {num(a.interval->mean), num(a.interval->low()), num(a.interval->high()), std::to_string(a.interval->n),
          to_string(kind)};
}

const std::vector<std::string> kStatHeader = {"mean", "ci_low", "ci_high", "n", "interval"};

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

const std::vector<TrialRecord>& records_of(const StoredRun& run, const Cell& c) {
  static const std::vector<TrialRecord> none;
  auto it = run.records.find(c.name);
  return it == run.records.end() ? none : it->second;
}

std::string permutation_text(const std::vector<std::size_t>& perm) {
  std::string s;
  for (std::size_t i = 0; i < perm.size(); ++i) s += (i ? " " : "") + std::to_string(perm[i]);
  return s;
}

}  // namespace

ReportSummary emit_figure_tables(const std::vector<StoredRun>& runs, const fs::path& out_dir,
                                 const ReportOptions& options) {
  ReportSummary summary;
  std::size_t total_records = 0;
  for (const auto& run : runs) {
    for (const auto& [cell, recs] : run.records) total_records += recs.size();
    for (const auto& m : run.missing) summary.missing.push_back(run.hash + "/" + m);
    for (const auto& s : run.skipped) summary.notes.push_back(run.hash + ": skipped " + s);
  }
  if (runs.empty() || total_records == 0) throw InvalidArgument("report: the results store is empty");
  if (!summary.missing.empty() && !options.partial) {
    std::string msg = "report: " + std::to_string(summary.missing.size()) + " trial(s) missing, first: " +
                      summary.missing.front() + " (use --partial to report anyway)";
    throw IncompleteStore(msg);
  }

  // Probe means by (task, size, layer), used by fig1's probe column.
  std::map<std::tuple<Task, std::size_t, std::size_t>, double> probe_mean;

  Csv probe_csv(concat({"task", "size", "layer", "metric"}, kStatHeader));
  for (const auto& run : runs) {
    if (run.manifest.experiment != ExperimentKind::probing) continue;
    const auto kind = run.manifest.interval_kind();
    for (const auto& c : run.cells) {
      const auto a = aggregate(records_of(run, c), c.task, kind);
      if (a.values.empty()) continue;
      probe_mean[{c.task, c.size, c.layer}] = a.mean();
      probe_csv.row(concat({task_name(c.task), std::to_string(c.size), std::to_string(c.layer), metric_name(c.task)},
                           stat_cells(a, kind)));
    }
  }

  auto progressive_table = [&](ExperimentKind which, bool with_probe) {
    std::vector<std::string> header = {"task", "size", "k", "metric"};
    header = concat(header, kStatHeader);
    if (with_probe) header.push_back("probe_acc_at_k");
    if (which == ExperimentKind::variant) {
      header.push_back("reinit_lr_multiplier");
      header.push_back("preserve_layer_norm");
    }
    Csv csv(header);
    for (const auto& run : runs) {
      if (run.manifest.experiment != which) continue;
      const auto kind = run.manifest.interval_kind();
      for (const auto& c : run.cells) {
        const auto a = aggregate(records_of(run, c), c.task, kind);
        if (a.values.empty()) continue;
        auto row = concat({task_name(c.task), std::to_string(c.size), std::to_string(c.layer), metric_name(c.task)},
                          stat_cells(a, kind));
        if (with_probe) {
          auto it = probe_mean.find({c.task, c.size, c.layer});
          row.push_back(it == probe_mean.end() ? "" : num(it->second));
        }
        if (which == ExperimentKind::variant) {
          row.push_back(num(run.manifest.reinit_lr_multiplier));
          row.push_back(run.manifest.preserve_layer_norm ? "true" : "false");
        }
        csv.row(row);
      }
    }
    return csv.str();
  };

  Csv single_csv(concat({"task", "size", "layer", "metric"}, kStatHeader));
  Csv fig3(concat({"task", "size", "block_start", "condition", "metric"}, kStatHeader));
  Csv fig4(concat({"task", "size", "condition", "permutation_id", "permutation", "metric"}, kStatHeader));
  Csv fig4_runs({"task", "size", "permutation_id", "trial", "metric", "value"});
  Csv fig4_kde({"task", "size", "x", "density", "bandwidth"});
  Csv table1({"task_pair", "method", "r", "p", "n"});

  for (const auto& run : runs) {
    const auto& m = run.manifest;
    const auto kind = m.interval_kind();
    switch (m.experiment) {
      case ExperimentKind::single_layer:
        for (const auto& c : run.cells) {
          const auto a = aggregate(records_of(run, c), c.task, kind);
          if (a.values.empty()) continue;
          single_csv.row(concat(
              {task_name(c.task), std::to_string(c.size), std::to_string(c.layer), metric_name(c.task)},
              stat_cells(a, kind)));
        }
        break;
      case ExperimentKind::localized:
        for (const auto& c : run.cells) {
          const auto a = aggregate(records_of(run, c), c.task, kind);
          if (a.values.empty()) continue;
          std::string condition = c.condition, start;
          if (c.condition.starts_with("block-reinit")) {
            condition = "reinit";
            start = std::to_string(c.layer);
          } else if (c.condition.starts_with("block-preserve")) {
            condition = "preserve";
            start = std::to_string(c.layer);
          }
          fig3.row(concat({task_name(c.task), std::to_string(c.size), start, condition, metric_name(c.task)},
                          stat_cells(a, kind)));
        }
        break;
      case ExperimentKind::permutation: {
        // Per-permutation means, paired across tasks by permutation index.
        std::map<std::pair<std::size_t, Task>, std::map<std::size_t, double>> perm_means;
        for (const auto& c : run.cells) {
          const auto& recs = records_of(run, c);
          const auto a = aggregate(recs, c.task, kind);
          if (a.values.empty()) continue;
          if (!c.permutation_index) {
            fig4.row(concat({task_name(c.task), std::to_string(c.size), c.condition, "", "", metric_name(c.task)},
                            stat_cells(a, kind)));
            continue;
          }
          const auto n = *c.permutation_index;
          perm_means[{c.size, c.task}][n] = a.mean();
          fig4.row(concat({task_name(c.task), std::to_string(c.size), "permuted", std::to_string(n),
                           permutation_text(c.plan.permutation), metric_name(c.task)},
                          stat_cells(a, kind)));
          for (const auto& r : recs) {
            fig4_runs.row({task_name(c.task), std::to_string(c.size), std::to_string(n),
                           std::to_string(r.trial_index), metric_name(c.task), num(primary_metric(c.task, r))});
          }
        }
        for (const auto& [key, means] : perm_means) {
          std::vector<double> xs;
          for (const auto& [n, v] : means) xs.push_back(v);
          try {
            const auto d = kde(xs, options.kde_grid);
            for (std::size_t i = 0; i < d.grid.size(); ++i) {
              fig4_kde.row({task_name(key.second), std::to_string(key.first), num(d.grid[i]), num(d.density[i]),
                            num(d.bandwidth)});
            }
          } catch (const InvalidArgument& e) {
            summary.notes.push_back(run.hash + ": no density for " + task_name(key.second) + " n" +
                                    std::to_string(key.first) + ": " + e.what());
          }
        }
        for (auto size : m.sizes) {
          for (std::size_t i = 0; i < m.tasks.size(); ++i) {
            for (std::size_t j = i + 1; j < m.tasks.size(); ++j) {
              const auto a = perm_means.find({size, m.tasks[i]});
              const auto b = perm_means.find({size, m.tasks[j]});
              const std::string pair_name = task_name(m.tasks[i]) + "/" + task_name(m.tasks[j]);
              if (a == perm_means.end() || b == perm_means.end()) continue;
              std::vector<double> xs, ys;
              for (const auto& [n, v] : a->second) {
                if (auto it = b->second.find(n); it != b->second.end()) {
                  xs.push_back(v);
                  ys.push_back(it->second);
                }
              }
              for (auto method : {CorrelationMethod::spearman, CorrelationMethod::pearson}) {
                try {
                  const auto r = correlation(xs, ys, method);
                  table1.row({pair_name, to_string(method), exact(r.r), exact(r.p), std::to_string(r.n)});
                } catch (const InvalidArgument& e) {
                  summary.notes.push_back(run.hash + ": no " + to_string(method) + " correlation for " +
                                          pair_name + ": " + e.what());
                }
              }
            }
          }
        }
        break;
      }
      case ExperimentKind::progressive:
      case ExperimentKind::variant:
      case ExperimentKind::probing: break;
    }
  }

  fs::create_directories(out_dir);
  auto emit = [&](const std::string& name, const std::string& text) {
    write_file_atomic(out_dir / name, text);
    summary.files.push_back(out_dir / name);
  };
  emit("fig1.csv", progressive_table(ExperimentKind::progressive, true));
  emit("fig1_variant.csv", progressive_table(ExperimentKind::variant, false));
  emit("fig_single_layer.csv", single_csv.str());
  emit("fig_probe.csv", probe_csv.str());
  emit("fig3.csv", fig3.str());
  emit("fig4.csv", fig4.str());
  emit("fig4_runs.csv", fig4_runs.str());
  emit("fig4_kde.csv", fig4_kde.str());
  emit("table1.csv", table1.str());

  json jruns = json::array();
  std::ostringstream text;
  for (const auto& run : runs) {
    std::size_t n = 0;
    for (const auto& [cell, recs] : run.records) n += recs.size();
    jruns.push_back({{"manifest_hash", run.hash},
                     {"experiment", to_string(run.manifest.experiment)},
                     {"cells", run.cells.size()},
                     {"records", n},
                     {"missing", run.missing},
                     {"skipped", run.skipped}});
    text << run.hash << "  " << to_string(run.manifest.experiment) << ": " << run.cells.size() << " cells, " << n
         << " records, " << run.missing.size() << " missing, " << run.skipped.size() << " skipped\n";
  }
  for (const auto& note : summary.notes) text << "note: " << note << "\n";
  for (const auto& miss : summary.missing) text << "missing: " << miss << "\n";
  std::vector<std::string> names;
  for (const auto& f : summary.files) names.push_back(f.filename().string());
  names.push_back("summary.json");
  names.push_back("summary.txt");
  emit("summary.json",
       json{{"runs", jruns}, {"files", names}, {"missing", summary.missing}, {"notes", summary.notes}}.dump(2) +
           "\n");
  emit("summary.txt", text.str());
  return summary;
}

ReportSummary report_store(const fs::path& store_root, const fs::path& out_dir, const ReportOptions& options) {
  return emit_figure_tables(load_store(store_root), out_dir, options);
}

}  // namespace relab
