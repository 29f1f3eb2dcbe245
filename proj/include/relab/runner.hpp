#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relab/data.hpp"
#include "relab/stats.hpp"
#include "relab/surgery.hpp"
#include "relab/training.hpp"

namespace relab {

enum class ExperimentKind { progressive, localized, single_layer, permutation, probing, variant };

std::string to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(const std::string& s);

inline constexpr int kManifestSchemaVersion = 1;

// One experiment grid. Relative paths are resolved against the manifest's
// directory by load_manifest.
struct ExperimentManifest {
  int schema_version = kManifestSchemaVersion;
  ExperimentKind experiment = ExperimentKind::progressive;
  std::vector<Task> tasks;
  std::vector<std::size_t> sizes;
  std::size_t trials = 3;                              // per cell, except size 500 which defaults to 50
  std::map<std::size_t, std::size_t> trials_by_size;  // explicit per-size counts win over both defaults
  std::uint64_t master_seed = 0;
  std::string checkpoint;
  std::string data_dir;

  // Finetuning and probing hyperparameters.
  double learning_rate = 2e-5;
  std::size_t epochs = 3;
  std::size_t batch_size = 8;
  double reinit_lr_multiplier = 1.0;
  bool preserve_layer_norm = false;
  ProbeHyper probe;

  std::size_t permutations = 10;
  std::size_t block_length = 3;
  // Restricts k (progressive, variant, single_layer), block starts (localized)
  // or layers (probing). Empty means the full range.
  std::vector<std::size_t> layers;
  // Adds full (k = L) and scratch (k = 0) reference cells to localized and permutation grids.
  bool reference_cells = true;
  std::optional<IntervalKind> interval;

  std::size_t trials_for(std::size_t size) const;
  // Interval used by the report: two_sigma for localized and permutation experiments, t95 otherwise.
  IntervalKind interval_kind() const;
  // Checks fields that do not need the filesystem.
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentManifest& m);
void from_json(const nlohmann::json& j, ExperimentManifest& m);

// Parses, applies RELAB_SEED when set, validates, and resolves relative paths.
ExperimentManifest load_manifest(const std::filesystem::path& path);
ExperimentManifest parse_manifest(const nlohmann::json& j, const std::filesystem::path& base_dir);

// 16 hex digits identifying the manifest content (paths as written, seed after override).
std::string manifest_hash(const ExperimentManifest& m);

struct Cell {
  std::string name;       // <task>__n<size>__<condition>
  Task task = Task::toy_sent;
  std::size_t size = 0;
  std::string condition;  // e.g. progressive-k3, block-reinit-s2, perm-n4, full, scratch, probe-l5
  SurgeryPlan plan;       // seed filled per trial
  bool probe = false;
  std::size_t layer = 0;  // probing layer, or k / block start for reporting
  std::optional<std::size_t> permutation_index;
  std::size_t trials = 0;
};

std::vector<Cell> enumerate_cells(const ExperimentManifest& m, std::size_t num_layers);

std::uint64_t trial_seed(std::uint64_t master_seed, const std::string& cell, std::size_t trial);

struct RunOptions {
  std::filesystem::path out;
  std::size_t jobs = 1;
  bool force = false;
  std::function<void(const std::string&)> log;  // progress lines; may be empty
};

struct RunSummary {
  std::filesystem::path store_dir;  // <out>/runs/<hash>
  std::string manifest_hash;
  std::size_t executed = 0;
  std::size_t reused = 0;
  std::size_t quarantined = 0;
  std::vector<std::string> skipped_cells;  // with reason
};

// Runs every missing trial of the grid and rewrites the completion index.
RunSummary run_manifest(const ExperimentManifest& m, const RunOptions& options);

// Writes `content` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

// Records of one run directory, loaded and validated.
struct StoredRun {
  std::filesystem::path dir;
  std::string hash;
  ExperimentManifest manifest;
  std::vector<Cell> cells;
  std::map<std::string, std::vector<TrialRecord>> records;  // by cell, ordered by trial index
  std::vector<std::string> missing;                         // "<cell>/trial-<i>"
  std::vector<std::string> skipped;                         // cells the runner could not execute
};

std::vector<StoredRun> load_store(const std::filesystem::path& root);

}  // namespace relab
