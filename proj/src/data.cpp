#include "relab/data.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_set>

namespace relab {

std::size_t GrammarSpec::vocab_size() const {
  return kNumSpecialTokens + options.num_topics + 2 * options.polarity_per_class + options.num_content;
}

std::int32_t GrammarSpec::marker(std::size_t topic) const {
  return kNumSpecialTokens + static_cast<std::int32_t>(topic);
}

std::int32_t GrammarSpec::first_polarity() const {
  return kNumSpecialTokens + static_cast<std::int32_t>(options.num_topics);
}

std::int32_t GrammarSpec::first_negative() const {
  return first_polarity() + static_cast<std::int32_t>(options.polarity_per_class);
}

std::int32_t GrammarSpec::first_content() const {
  return first_negative() + static_cast<std::int32_t>(options.polarity_per_class);
}

bool GrammarSpec::is_positive(std::int32_t t) const { return t >= first_polarity() && t < first_negative(); }
bool GrammarSpec::is_negative(std::int32_t t) const { return t >= first_negative() && t < first_content(); }
bool GrammarSpec::is_chain(std::int32_t t) const {
  return t >= first_polarity() && t < static_cast<std::int32_t>(vocab_size());
}

int GrammarSpec::topic_of_marker(std::int32_t t) const {
  const auto m = t - kNumSpecialTokens;
  return m >= 0 && m < static_cast<std::int32_t>(options.num_topics) ? m : -1;
}

GrammarSpec make_grammar(const GrammarOptions& options, std::uint64_t seed) {
  if (options.num_topics < 2) throw InvalidArgument("grammar: need at least two topics");
  if (options.polarity_per_class < 1 || options.num_content < 1) {
    throw InvalidArgument("grammar: polarity and content classes must be non-empty");
  }
  if (options.min_len < 2 || options.min_len > options.max_len || options.min_segment_len < 1 ||
      options.min_segment_len > options.max_segment_len) {
    throw InvalidArgument("grammar: invalid length ranges");
  }
  GrammarSpec g;
  g.options = options;
  g.seed = seed;
  const std::size_t V = g.vocab_size();
  const std::size_t chain = 2 * options.polarity_per_class + options.num_content;
  if (options.support_size < 1 || options.support_size > chain) {
    throw InvalidArgument("grammar: support_size must be in 1.." + std::to_string(chain));
  }
  Rng rng(derive_seed(seed, "grammar"));
  g.transitions.assign(options.num_topics, std::vector<std::vector<double>>(V, std::vector<double>(V, 0.0)));
  for (std::size_t t = 0; t < options.num_topics; ++t) {
    g.leaning.push_back(t % 2 == 0 ? +1 : -1);
  }
  const auto P = static_cast<std::uint64_t>(options.polarity_per_class);
  for (std::size_t t = 0; t < options.num_topics; ++t) {
    for (std::int32_t src = g.first_chain(); src < static_cast<std::int32_t>(V); ++src) {
      std::vector<std::int32_t> support;
      while (support.size() < options.support_size) {
        auto dst = g.first_chain() + static_cast<std::int32_t>(rng.uniform_int(chain));
        if (g.is_positive(dst) || g.is_negative(dst)) {
          const bool positive = (g.leaning[t] > 0) == rng.bernoulli(options.polarity_leaning);
          dst = (positive ? g.first_polarity() : g.first_negative()) + static_cast<std::int32_t>(rng.uniform_int(P));
        }
        if (std::find(support.begin(), support.end(), dst) == support.end()) support.push_back(dst);
      }
      std::vector<double> w(support.size());
      double total = 0.0;
      for (auto& x : w) {
        x = 0.5 + rng.uniform();
        total += x;
      }
      for (std::size_t i = 0; i < support.size(); ++i) {
        g.transitions[t][static_cast<std::size_t>(src)][static_cast<std::size_t>(support[i])] = w[i] / total;
      }
    }
  }
  return g;
}

void to_json(nlohmann::json& j, const GrammarSpec& g) {
  const auto& o = g.options;
  nlohmann::json topics = nlohmann::json::array();
  for (std::size_t t = 0; t < g.transitions.size(); ++t) {
    nlohmann::json rows = nlohmann::json::object();
    for (std::size_t src = 0; src < g.transitions[t].size(); ++src) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t dst = 0; dst < g.transitions[t][src].size(); ++dst) {
        if (g.transitions[t][src][dst] > 0.0) row.push_back({dst, g.transitions[t][src][dst]});
      }
      if (!row.empty()) rows[std::to_string(src)] = row;
    }
    topics.push_back({{"leaning", g.leaning[t]}, {"transitions", rows}});
  }
  j = nlohmann::json{{"seed", g.seed},
                     {"vocab_size", g.vocab_size()},
                     {"options",
                      {{"num_topics", o.num_topics},
                       {"polarity_per_class", o.polarity_per_class},
                       {"num_content", o.num_content},
                       {"support_size", o.support_size},
                       {"polarity_leaning", o.polarity_leaning},
                       {"min_len", o.min_len},
                       {"max_len", o.max_len},
                       {"min_segment_len", o.min_segment_len},
                       {"max_segment_len", o.max_segment_len},
                       {"sent_max_margin", o.sent_max_margin}}},
                     {"topics", topics}};
}

void from_json(const nlohmann::json& j, GrammarSpec& g) {
  const auto& o = j.at("options");
  g.options.num_topics = o.at("num_topics");
  g.options.polarity_per_class = o.at("polarity_per_class");
  g.options.num_content = o.at("num_content");
  g.options.support_size = o.at("support_size");
  g.options.polarity_leaning = o.at("polarity_leaning");
  g.options.min_len = o.at("min_len");
  g.options.max_len = o.at("max_len");
  g.options.min_segment_len = o.at("min_segment_len");
  g.options.max_segment_len = o.at("max_segment_len");
  g.options.sent_max_margin = o.at("sent_max_margin");
  g.seed = j.at("seed");
  const std::size_t V = g.vocab_size();
  g.transitions.assign(g.options.num_topics, std::vector<std::vector<double>>(V, std::vector<double>(V, 0.0)));
  g.leaning.clear();
  const auto& topics = j.at("topics");
  for (std::size_t t = 0; t < g.options.num_topics; ++t) {
    g.leaning.push_back(topics.at(t).at("leaning"));
    for (const auto& [src, row] : topics.at(t).at("transitions").items()) {
      for (const auto& entry : row) {
        g.transitions[t].at(std::stoul(src)).at(entry.at(0).get<std::size_t>()) = entry.at(1).get<double>();
      }
    }
  }
}

std::string task_name(Task task) {
  switch (task) {
    case Task::toy_sent: return "toy-sent";
    case Task::toy_pair: return "toy-pair";
    case Task::toy_accept: return "toy-accept";
  }
  return "unknown";
}

Task task_from_name(const std::string& name) {
  for (auto t : kAllTasks) {
    if (task_name(t) == name) return t;
  }
  throw InvalidArgument("unknown task \"" + name + "\"");
}

namespace {

std::size_t uniform_in(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.uniform_int(hi - lo + 1));
}

std::int32_t next_token(const GrammarSpec& g, std::size_t topic, std::int32_t from, Rng& rng) {
  return static_cast<std::int32_t>(rng.categorical(g.transitions[topic][static_cast<std::size_t>(from)]));
}

std::int32_t random_chain_token(const GrammarSpec& g, Rng& rng) {
  const auto n = g.vocab_size() - static_cast<std::size_t>(g.first_chain());
  return g.first_chain() + static_cast<std::int32_t>(rng.uniform_int(n));
}

// `length` chain tokens; the first follows `prev` (or is uniform when prev < 0).
std::vector<std::int32_t> walk(const GrammarSpec& g, std::size_t topic, std::int32_t prev, std::size_t length,
                               Rng& rng) {
  std::vector<std::int32_t> out;
  out.reserve(length);
  std::int32_t cur = prev < 0 ? random_chain_token(g, rng) : next_token(g, topic, prev, rng);
  out.push_back(cur);
  while (out.size() < length) {
    cur = next_token(g, topic, cur, rng);
    out.push_back(cur);
  }
  return out;
}

TokenSequence single(const GrammarSpec& g, std::size_t topic, const std::vector<std::int32_t>& chain) {
  TokenSequence s;
  s.tokens.push_back(kClsId);
  s.tokens.push_back(g.marker(topic));
  s.tokens.insert(s.tokens.end(), chain.begin(), chain.end());
  s.tokens.push_back(kSepId);
  s.types.assign(s.tokens.size(), 0);
  return s;
}

TokenSequence pair(const GrammarSpec& g, std::size_t topic, const std::vector<std::int32_t>& a,
                   const std::vector<std::int32_t>& b) {
  TokenSequence s = single(g, topic, a);
  for (auto t : b) s.tokens.push_back(t);
  s.tokens.push_back(kSepId);
  s.types.resize(s.tokens.size(), 1);
  return s;
}

bool has_violation(const GrammarSpec& g, std::size_t topic, const std::vector<std::int32_t>& chain) {
  for (std::size_t i = 0; i + 1 < chain.size(); ++i) {
    if (g.probability(topic, chain[i], chain[i + 1]) == 0.0) return true;
  }
  return false;
}

bool swap_breaks_support(const GrammarSpec& g, std::size_t topic, std::vector<std::int32_t>& chain, std::size_t i) {
  if (chain[i] == chain[i + 1]) return false;
  std::swap(chain[i], chain[i + 1]);
  const std::size_t lo = i == 0 ? 0 : i - 1;
  const std::size_t hi = std::min(chain.size() - 1, i + 2);
  for (std::size_t p = lo; p < hi; ++p) {
    if (g.probability(topic, chain[p], chain[p + 1]) == 0.0) return true;
  }
  std::swap(chain[i], chain[i + 1]);
  return false;
}

// Two adjacent swaps at non-neighbouring positions, each introducing a
// zero-probability transition. Returns false when no such pair is found.
bool perturb(const GrammarSpec& g, std::size_t topic, std::vector<std::int32_t>& chain, Rng& rng) {
  std::size_t first = chain.size();
  for (int attempt = 0; attempt < 64 && first == chain.size(); ++attempt) {
    const auto i = static_cast<std::size_t>(rng.uniform_int(chain.size() - 1));
    if (swap_breaks_support(g, topic, chain, i)) first = i;
  }
  if (first == chain.size()) return false;
  for (int attempt = 0; attempt < 64; ++attempt) {
    const auto i = static_cast<std::size_t>(rng.uniform_int(chain.size() - 1));
    if (i + 1 >= first && i <= first + 1) continue;
    if (swap_breaks_support(g, topic, chain, i)) return has_violation(g, topic, chain);
  }
  return false;
}

int polarity_balance(const GrammarSpec& g, const std::vector<std::int32_t>& chain) {
  int balance = 0;
  for (auto t : chain) {
    if (g.is_positive(t)) ++balance;
    if (g.is_negative(t)) --balance;
  }
  return balance;
}

std::size_t random_topic(const GrammarSpec& g, Rng& rng) {
  return static_cast<std::size_t>(rng.uniform_int(g.options.num_topics));
}

LabeledExample make_example(Task task, const GrammarSpec& g, std::int32_t label, Rng& rng) {
  const auto& o = g.options;
  for (;;) {
    const std::size_t topic = random_topic(g, rng);
    TokenSequence seq;
    switch (task) {
      case Task::toy_sent: {
        auto chain = walk(g, topic, -1, uniform_in(rng, o.min_len, o.max_len), rng);
        const int balance = polarity_balance(g, chain);
        if (balance == 0 || (balance > 0) != (label == 1)) continue;
        if (o.sent_max_margin > 0 && static_cast<std::size_t>(std::abs(balance)) > o.sent_max_margin) continue;
        seq = single(g, topic, chain);
        break;
      }
      case Task::toy_pair: {
        auto a = walk(g, topic, -1, uniform_in(rng, o.min_segment_len, o.max_segment_len), rng);
        std::size_t b_topic = topic;
        if (label == 0) {
          b_topic = static_cast<std::size_t>(rng.uniform_int(o.num_topics - 1));
          if (b_topic >= topic) ++b_topic;
        }
        auto b = walk(g, b_topic, a.back(), uniform_in(rng, o.min_segment_len, o.max_segment_len), rng);
        seq = pair(g, topic, a, b);
        break;
      }
      case Task::toy_accept: {
        auto chain = walk(g, topic, -1, uniform_in(rng, o.min_len, o.max_len), rng);
        if (label == 0 && !perturb(g, topic, chain, rng)) continue;
        seq = single(g, topic, chain);
        break;
      }
    }
    return LabeledExample{std::move(seq.tokens), std::move(seq.types), label};
  }
}

std::string example_key(const LabeledExample& e) {
  return std::string(reinterpret_cast<const char*>(e.tokens.data()), e.tokens.size() * sizeof(std::int32_t)) +
         std::string(reinterpret_cast<const char*>(e.types.data()), e.types.size() * sizeof(std::int32_t));
}

std::vector<LabeledExample> make_split(Task task, const GrammarSpec& g, std::size_t n, Rng& rng,
                                       std::unordered_set<std::string>& seen) {
  std::vector<std::int32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::int32_t>(i % 2);
  rng.shuffle(labels);
  std::vector<LabeledExample> out;
  out.reserve(n);
  for (auto label : labels) {
    for (;;) {
      auto e = make_example(task, g, label, rng);
      if (seen.insert(example_key(e)).second) {
        out.push_back(std::move(e));
        break;
      }
    }
  }
  return out;
}

}  // namespace

std::vector<TokenSequence> gen_pretrain_corpus(const GrammarSpec& grammar, std::size_t num_sequences,
                                               std::uint64_t seed) {
  if (num_sequences == 0) throw InvalidArgument("gen_pretrain_corpus: num_sequences must be positive");
  const auto& o = grammar.options;
  Rng rng(derive_seed(seed, "corpus"));
  std::vector<TokenSequence> corpus;
  corpus.reserve(num_sequences);
  for (std::size_t i = 0; i < num_sequences; ++i) {
    const std::size_t topic = random_topic(grammar, rng);
    if (rng.bernoulli(0.5)) {
      corpus.push_back(single(grammar, topic, walk(grammar, topic, -1, uniform_in(rng, o.min_len, o.max_len), rng)));
    } else {
      auto a = walk(grammar, topic, -1, uniform_in(rng, o.min_segment_len, o.max_segment_len), rng);
      auto b = walk(grammar, topic, a.back(), uniform_in(rng, o.min_segment_len, o.max_segment_len), rng);
      corpus.push_back(pair(grammar, topic, a, b));
    }
  }
  return corpus;
}

TaskDataset gen_task(Task task, const GrammarSpec& grammar, std::size_t n, std::uint64_t seed) {
  if (n < 10) throw InvalidArgument("gen_task: need at least 10 training examples, got " + std::to_string(n));
  Rng rng(derive_seed(seed, "task/" + task_name(task)));
  std::unordered_set<std::string> seen;
  TaskDataset ds;
  ds.task = task;
  ds.seed = seed;
  ds.train = make_split(task, grammar, n, rng, seen);
  ds.validation = make_split(task, grammar, kValidationSize, rng, seen);
  return ds;
}

TaskDataset subsample(const TaskDataset& dataset, std::size_t size, std::uint64_t trial_index,
                      std::uint64_t master_seed) {
  if (size > dataset.train.size()) {
    throw InvalidArgument("subsample: size " + std::to_string(size) + " exceeds the " +
                          std::to_string(dataset.train.size()) + " training examples of " + task_name(dataset.task));
  }
  Rng rng(derive_seed(master_seed, "subsample/" + task_name(dataset.task) + "/" + std::to_string(size) + "/" +
                                       std::to_string(trial_index)));
  std::vector<std::size_t> idx(dataset.train.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  // Partial Fisher-Yates: the first `size` slots end up a uniform sample.
  for (std::size_t i = 0; i < size; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_int(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  TaskDataset out;
  out.task = dataset.task;
  out.seed = dataset.seed;
  out.validation = dataset.validation;
  out.train.reserve(size);
  for (std::size_t i = 0; i < size; ++i) out.train.push_back(dataset.train[idx[i]]);
  return out;
}

// ---------------------------------------------------------------------------
// Files

void write_examples_jsonl(const std::filesystem::path& path, const std::vector<LabeledExample>& examples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& e : examples) {
    out << nlohmann::json{{"tokens", e.tokens}, {"types", e.types}, {"label", e.label}}.dump() << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<LabeledExample> read_examples_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      LabeledExample e;
      e.tokens = j.at("tokens").get<std::vector<std::int32_t>>();
      e.types = j.at("types").get<std::vector<std::int32_t>>();
      e.label = j.at("label").get<std::int32_t>();
      if (e.tokens.size() != e.types.size()) throw ParseError("tokens and types differ in length");
      if (e.label != 0 && e.label != 1) throw ParseError("label must be 0 or 1");
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_corpus_jsonl(const std::filesystem::path& path, const std::vector<TokenSequence>& corpus) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& s : corpus) out << nlohmann::json{{"tokens", s.tokens}, {"types", s.types}}.dump() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<TokenSequence> read_corpus_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<TokenSequence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("tokens").get<std::vector<std::int32_t>>(), j.at("types").get<std::vector<std::int32_t>>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_dataset(const std::filesystem::path& dir, const TaskDataset& dataset) {
  const auto sub = dir / task_name(dataset.task);
  std::filesystem::create_directories(sub);
  write_examples_jsonl(sub / "train.jsonl", dataset.train);
  write_examples_jsonl(sub / "validation.jsonl", dataset.validation);
}

TaskDataset load_dataset(const std::filesystem::path& dir, Task task) {
  const auto sub = dir / task_name(task);
  TaskDataset ds;
  ds.task = task;
  ds.train = read_examples_jsonl(sub / "train.jsonl");
  ds.validation = read_examples_jsonl(sub / "validation.jsonl");
  return ds;
}

}  // namespace relab
