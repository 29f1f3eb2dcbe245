// relab: command-line front end for data generation, pretraining, experiment
// grids, reports and standalone checkpoint surgery.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "relab/report.hpp"
#include "relab/runner.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace relab;

namespace {

void print_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << std::endl;
}

struct DatagenArgs {
  fs::path out;
  std::uint64_t seed = 0;
  std::size_t pool = 60000;
  std::size_t accept_pool = 8500;
  std::size_t corpus = 100000;
  std::size_t heldout = 2000;
};

int datagen(const DatagenArgs& a) {
  if (a.corpus == 0 || a.heldout == 0) throw InvalidArgument("datagen: corpus sizes must be positive");
  const auto grammar = make_grammar(GrammarOptions{}, a.seed);
  fs::create_directories(a.out);
  write_file_atomic(a.out / "grammar.json", json(grammar).dump() + "\n");
  auto corpus = gen_pretrain_corpus(grammar, a.corpus + a.heldout, a.seed);
  std::vector<TokenSequence> heldout(corpus.end() - static_cast<std::ptrdiff_t>(a.heldout), corpus.end());
  corpus.resize(a.corpus);
  write_corpus_jsonl(a.out / "corpus.jsonl", corpus);
  write_corpus_jsonl(a.out / "corpus_heldout.jsonl", heldout);
  json tasks = json::object();
  for (auto task : kAllTasks) {
    const auto n = task == Task::toy_accept ? a.accept_pool : a.pool;
    const auto ds = gen_task(task, grammar, n, a.seed);
    save_dataset(a.out, ds);
    tasks[task_name(task)] = {{"train", ds.train.size()}, {"validation", ds.validation.size()}};
  }
  std::cout << json{{"out", a.out.string()},
                    {"vocab_size", grammar.vocab_size()},
                    {"corpus", corpus.size()},
                    {"heldout", heldout.size()},
                    {"tasks", tasks}}
                   .dump(2)
            << std::endl;
  return 0;
}

struct PretrainArgs {
  fs::path data;
  fs::path out;
  PretrainOptions options;
  ModelConfig config;
};

int pretrain(PretrainArgs a) {
  GrammarSpec grammar;
  try {
    grammar = json::parse(read_file(a.data / "grammar.json")).get<GrammarSpec>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("grammar.json: ") + e.what());
  }
  a.config.vocab_size = grammar.vocab_size();
  a.config.validate();
  const auto corpus = read_corpus_jsonl(a.data / "corpus.jsonl");
  const auto result = pretrain_mlm(a.config, corpus, a.options);
  save_checkpoint(result.checkpoint, a.out);
  json summary{{"out", a.out.string()}, {"steps", a.options.steps}, {"config", a.config}};
  if (!result.step_losses.empty()) {
    const std::size_t tail = std::min<std::size_t>(100, result.step_losses.size());
    summary["final_loss"] =
        std::accumulate(result.step_losses.end() - static_cast<std::ptrdiff_t>(tail), result.step_losses.end(), 0.0) /
        static_cast<double>(tail);
  }
  if (fs::exists(a.data / "corpus_heldout.jsonl")) {
    const auto heldout = read_corpus_jsonl(a.data / "corpus_heldout.jsonl");
    const auto eval_seed = derive_seed(a.options.seed, "mlm-eval");
    summary["heldout_mlm_accuracy"] = mlm_accuracy(result, heldout, eval_seed);
    summary["unigram_baseline_accuracy"] = unigram_baseline_accuracy(corpus, heldout, a.config.vocab_size, eval_seed);
  }
  std::cout << summary.dump(2) << std::endl;
  return 0;
}

int run(const fs::path& manifest_path, const fs::path& out, std::size_t jobs, bool force) {
  const auto manifest = load_manifest(manifest_path);
  RunOptions options;
  options.out = out;
  options.jobs = jobs;
  options.force = force;
  options.log = [](const std::string& line) { std::cerr << line << std::endl; };
  const auto s = run_manifest(manifest, options);
  std::cout << json{{"store", s.store_dir.string()},
                    {"manifest_hash", s.manifest_hash},
                    {"executed", s.executed},
                    {"reused", s.reused},
                    {"quarantined", s.quarantined},
                    {"skipped_cells", s.skipped_cells}}
                   .dump(2)
            << std::endl;
  return 0;
}

int report(const fs::path& store, fs::path out, bool partial) {
  if (out.empty()) out = store / "report";
  ReportOptions options;
  options.partial = partial;
  const auto s = report_store(store, out, options);
  std::vector<std::string> files;
  for (const auto& f : s.files) files.push_back(f.string());
  std::cout << json{{"files", files}, {"missing", s.missing}, {"notes", s.notes}}.dump(2) << std::endl;
  return 0;
}

int surgery(const fs::path& plan_path, const fs::path& in, const fs::path& out) {
  SurgeryPlan plan;
  try {
    plan = json::parse(read_file(plan_path)).get<SurgeryPlan>();
  } catch (const json::exception& e) {
    throw ParseError("surgery plan " + plan_path.string() + ": " + e.what());
  }
  const auto result = apply_surgery(load_checkpoint(in), plan);
  save_checkpoint(result.checkpoint, out);
  std::cout << json{{"plan", plan}, {"report", result.report}}.dump(2) << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter-transfer laboratory for small transformer encoders"};
  app.require_subcommand(1);

  DatagenArgs dg;
  auto* cmd_datagen = app.add_subcommand("datagen", "Generate the grammar, pretraining corpus and task pools");
  cmd_datagen->add_option("--out", dg.out, "Output directory")->required();
  cmd_datagen->add_option("--seed", dg.seed, "Generation seed");
  cmd_datagen->add_option("--pool", dg.pool, "Training pool size for toy-sent and toy-pair");
  cmd_datagen->add_option("--accept-pool", dg.accept_pool, "Training pool size for toy-accept");
  cmd_datagen->add_option("--corpus", dg.corpus, "Pretraining corpus size");
  cmd_datagen->add_option("--heldout", dg.heldout, "Held-out corpus size for MLM evaluation");

  PretrainArgs pt;
  auto* cmd_pretrain = app.add_subcommand("pretrain", "Masked-LM pretraining on a generated corpus");
  cmd_pretrain->add_option("--data", pt.data, "Directory written by datagen")->required();
  cmd_pretrain->add_option("--out", pt.out, "Checkpoint path")->required();
  cmd_pretrain->add_option("--steps", pt.options.steps, "Optimizer steps");
  cmd_pretrain->add_option("--seed", pt.options.seed, "Initialization and masking seed");
  cmd_pretrain->add_option("--lr", pt.options.learning_rate, "Adam learning rate");
  cmd_pretrain->add_option("--batch", pt.options.batch_size, "Sequences per step");
  cmd_pretrain->add_option("--layers", pt.config.num_layers, "Encoder layers");
  cmd_pretrain->add_option("--hidden", pt.config.hidden_size, "Hidden size");
  cmd_pretrain->add_option("--heads", pt.config.num_heads, "Attention heads");
  cmd_pretrain->add_option("--intermediate", pt.config.intermediate_size, "Feed-forward size");

  fs::path manifest_pos, manifest_opt, run_out = "results";
  std::size_t jobs = 1;
  bool force = false;
  auto* cmd_run = app.add_subcommand("run", "Execute an experiment manifest");
  cmd_run->add_option("manifest_path", manifest_pos, "Manifest JSON");
  cmd_run->add_option("--manifest", manifest_opt, "Manifest JSON");
  cmd_run->add_option("--out", run_out, "Results store root");
  cmd_run->add_option("--jobs", jobs, "Parallel trials")->check(CLI::PositiveNumber);
  cmd_run->add_flag("--force", force, "Recompute trials that already have records");

  fs::path store, report_out;
  bool partial = false;
  auto* cmd_report = app.add_subcommand("report", "Emit figure tables from a results store");
  cmd_report->add_option("store", store, "Results store root")->required();
  cmd_report->add_option("--out", report_out, "Output directory (default <store>/report)");
  cmd_report->add_flag("--partial", partial, "Report an incomplete store and list missing trials");

  fs::path plan_path, in_path, out_path;
  auto* cmd_surgery = app.add_subcommand("surgery", "Apply a surgery plan to a checkpoint");
  cmd_surgery->add_option("plan", plan_path, "Surgery plan JSON")->required();
  cmd_surgery->add_option("in", in_path, "Input checkpoint")->required();
  cmd_surgery->add_option("out", out_path, "Output checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  }

  try {
    if (*cmd_datagen) return datagen(dg);
    if (*cmd_pretrain) return pretrain(pt);
    if (*cmd_run) {
      if (manifest_pos.empty() == manifest_opt.empty()) {
        throw InvalidArgument("run: give the manifest either positionally or with --manifest");
      }
      return run(manifest_pos.empty() ? manifest_opt : manifest_pos, run_out, jobs, force);
    }
    if (*cmd_report) return report(store, report_out, partial);
    if (*cmd_surgery) return surgery(plan_path, in_path, out_path);
  } catch (const Error& e) {
    print_error(e.kind(), e.what());
    return 1;
  } catch (const fs::filesystem_error& e) {
    print_error("io", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return 1;
}
