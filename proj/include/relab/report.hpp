#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "relab/runner.hpp"

namespace relab {

// Headline metric per task: Matthews correlation for toy-accept, accuracy otherwise.
std::string metric_name(Task task);
double primary_metric(Task task, const TrialRecord& record);

struct ReportOptions {
  bool partial = false;  // emit tables for whatever is present instead of failing on missing trials
  std::size_t kde_grid = 256;
};

struct ReportSummary {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> missing;  // "<hash>/<cell>/trial-<i>"
  std::vector<std::string> notes;    // skipped cells and tables that could not be formed
};

// Writes the figure tables for every run in `runs` into `out_dir`:
//   fig1.csv, fig1_variant.csv, fig_single_layer.csv, fig_probe.csv, fig3.csv,
//   fig4.csv, fig4_runs.csv, fig4_kde.csv, table1.csv, summary.json, summary.txt
// Tables whose experiment is absent are written with a header only.
// Throws IncompleteStore when trials are missing and !options.partial, and
// InvalidArgument when there is nothing to report.
ReportSummary emit_figure_tables(const std::vector<StoredRun>& runs, const std::filesystem::path& out_dir,
                                 const ReportOptions& options = {});

ReportSummary report_store(const std::filesystem::path& store_root, const std::filesystem::path& out_dir,
                           const ReportOptions& options = {});

}  // namespace relab
