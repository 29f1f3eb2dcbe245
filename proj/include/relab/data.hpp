#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relab/model.hpp"
#include "relab/rng.hpp"

namespace relab {

// Vocabulary layout: [PAD] [CLS] [SEP] [MASK], one marker per topic, the
// positive polarity tokens, the negative polarity tokens, then content tokens.
// Polarity and content tokens together form the chain vocabulary that the
// per-topic Markov transitions range over.
struct GrammarOptions {
  std::size_t num_topics = 4;
  std::size_t polarity_per_class = 8;
  std::size_t num_content = 44;
  std::size_t support_size = 4;     // successors per (topic, token)
  double polarity_leaning = 0.8;    // share of polarity successors from the topic's leaning class
  std::size_t min_len = 8;          // chain length of single sentences
  std::size_t max_len = 12;
  std::size_t min_segment_len = 5;  // chain length of each pair segment
  std::size_t max_segment_len = 7;
  // toy-sent keeps only sentences whose |#positive - #negative| is at most
  // this (0 means no limit).
  std::size_t sent_max_margin = 0;
};

struct GrammarSpec {
  GrammarOptions options;
  std::uint64_t seed = 0;
  // transitions[topic][src][dst]; rows of chain tokens sum to 1, other rows are zero.
  std::vector<std::vector<std::vector<double>>> transitions;
  std::vector<int> leaning;  // +1 positive-leaning topic, -1 negative-leaning

  std::size_t vocab_size() const;
  std::int32_t marker(std::size_t topic) const;
  std::int32_t first_polarity() const;
  std::int32_t first_negative() const;
  std::int32_t first_content() const;
  std::int32_t first_chain() const { return first_polarity(); }
  bool is_positive(std::int32_t token) const;
  bool is_negative(std::int32_t token) const;
  bool is_chain(std::int32_t token) const;
  // Topic whose marker is `token`, or -1.
  int topic_of_marker(std::int32_t token) const;
  double probability(std::size_t topic, std::int32_t from, std::int32_t to) const {
    return transitions[topic][static_cast<std::size_t>(from)][static_cast<std::size_t>(to)];
  }
};

GrammarSpec make_grammar(const GrammarOptions& options, std::uint64_t seed);

void to_json(nlohmann::json& j, const GrammarSpec& g);
void from_json(const nlohmann::json& j, GrammarSpec& g);

enum class Task { toy_sent, toy_pair, toy_accept };

std::string task_name(Task task);
Task task_from_name(const std::string& name);
inline constexpr Task kAllTasks[] = {Task::toy_sent, Task::toy_pair, Task::toy_accept};

struct TokenSequence {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> types;

  SequenceView view() const { return {tokens, types}; }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

struct LabeledExample {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> types;
  std::int32_t label = 0;

  SequenceView view() const { return {tokens, types}; }
  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

struct TaskDataset {
  Task task = Task::toy_sent;
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> validation;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kValidationSize = 1000;

// Single sentences ([CLS] marker chain [SEP]) and same-topic pairs
// ([CLS] marker A [SEP] B [SEP]), half each in expectation.
std::vector<TokenSequence> gen_pretrain_corpus(const GrammarSpec& grammar, std::size_t num_sequences,
                                               std::uint64_t seed);

// `n` training examples plus kValidationSize validation examples, labels
// balanced to within one example per split, no example repeated anywhere.
TaskDataset gen_task(Task task, const GrammarSpec& grammar, std::size_t n, std::uint64_t seed);

// Uniform sample of `size` training examples without replacement, seeded by
// derive_seed(master_seed, "subsample/<task>/<size>/<trial_index>").
TaskDataset subsample(const TaskDataset& dataset, std::size_t size, std::uint64_t trial_index,
                      std::uint64_t master_seed);

// Dataset files: <dir>/<task>/{train,validation}.jsonl, one
// {"tokens": [...], "types": [...], "label": 0|1} object per line.
void save_dataset(const std::filesystem::path& dir, const TaskDataset& dataset);
TaskDataset load_dataset(const std::filesystem::path& dir, Task task);
void write_examples_jsonl(const std::filesystem::path& path, const std::vector<LabeledExample>& examples);
std::vector<LabeledExample> read_examples_jsonl(const std::filesystem::path& path);
void write_corpus_jsonl(const std::filesystem::path& path, const std::vector<TokenSequence>& corpus);
std::vector<TokenSequence> read_corpus_jsonl(const std::filesystem::path& path);

}  // namespace relab
