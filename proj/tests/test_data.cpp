#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "relab/data.hpp"
#include "test_util.hpp"

using namespace relab;
using relab::testing::TempDir;

namespace {

const GrammarSpec& grammar() {
  static const GrammarSpec g = make_grammar(GrammarOptions{}, 7);
  return g;
}

struct Parsed {
  std::size_t topic;
  std::vector<std::int32_t> a, b;  // chain tokens of the first and (for pairs) second segment
};

Parsed parse(const GrammarSpec& g, const std::vector<std::int32_t>& tokens) {
  Parsed p;
  EXPECT_EQ(tokens.front(), kClsId);
  const int topic = g.topic_of_marker(tokens[1]);
  EXPECT_GE(topic, 0);
  p.topic = static_cast<std::size_t>(topic);
  std::size_t i = 2;
  for (; tokens[i] != kSepId; ++i) p.a.push_back(tokens[i]);
  for (++i; i < tokens.size() && tokens[i] != kSepId; ++i) p.b.push_back(tokens[i]);
  return p;
}

double chain_probability(const GrammarSpec& g, std::size_t topic, std::int32_t prev,
                         const std::vector<std::int32_t>& chain) {
  double p = 1.0;
  for (auto t : chain) {
    p *= g.probability(topic, prev, t);
    prev = t;
  }
  return p;
}

// Bayes-optimal decisions derived from the generating grammar.
std::int32_t bayes_sent(const GrammarSpec& g, const Parsed& p) {
  int balance = 0;
  for (auto t : p.a) balance += g.is_positive(t) ? 1 : g.is_negative(t) ? -1 : 0;
  return balance > 0 ? 1 : 0;
}

std::int32_t bayes_pair(const GrammarSpec& g, const Parsed& p) {
  const double same = chain_probability(g, p.topic, p.a.back(), p.b);
  double other = 0.0;
  for (std::size_t t = 0; t < g.options.num_topics; ++t) {
    if (t != p.topic) other += chain_probability(g, t, p.a.back(), p.b);
  }
  other /= static_cast<double>(g.options.num_topics - 1);
  return same >= other ? 1 : 0;
}

std::int32_t bayes_accept(const GrammarSpec& g, const Parsed& p) {
  for (std::size_t i = 0; i + 1 < p.a.size(); ++i) {
    if (g.probability(p.topic, p.a[i], p.a[i + 1]) == 0.0) return 0;
  }
  return 1;
}

std::string key(const LabeledExample& e) { return nlohmann::json{e.tokens, e.types}.dump(); }

}  // namespace

// ---------------------------------------------------------------------------
// Grammar

TEST(Grammar, RowsAreDistributions) {
  const auto& g = grammar();
  EXPECT_EQ(g.vocab_size(), 68u);
  for (std::size_t t = 0; t < g.options.num_topics; ++t) {
    for (std::int32_t src = 0; src < static_cast<std::int32_t>(g.vocab_size()); ++src) {
      double total = 0.0;
      std::size_t support = 0;
      for (std::int32_t dst = 0; dst < static_cast<std::int32_t>(g.vocab_size()); ++dst) {
        const double p = g.probability(t, src, dst);
        EXPECT_GE(p, 0.0);
        if (p > 0) {
          EXPECT_TRUE(g.is_chain(dst));
          ++support;
        }
        total += p;
      }
      if (g.is_chain(src)) {
        EXPECT_NEAR(total, 1.0, 1e-9);
        EXPECT_EQ(support, g.options.support_size);
      } else {
        EXPECT_EQ(total, 0.0);
      }
    }
  }
}

TEST(Grammar, VocabularyLayout) {
  const auto& g = grammar();
  EXPECT_EQ(g.marker(0), 4);
  EXPECT_EQ(g.first_polarity(), 8);
  EXPECT_EQ(g.first_negative(), 16);
  EXPECT_EQ(g.first_content(), 24);
  EXPECT_TRUE(g.is_positive(15));
  EXPECT_TRUE(g.is_negative(16));
  EXPECT_FALSE(g.is_chain(7));
  EXPECT_EQ(g.topic_of_marker(7), 3);
  EXPECT_EQ(g.topic_of_marker(8), -1);
}

TEST(Grammar, DeterministicAndSerializable) {
  const auto a = make_grammar(GrammarOptions{}, 7);
  EXPECT_EQ(a.transitions, grammar().transitions);
  EXPECT_NE(make_grammar(GrammarOptions{}, 8).transitions, a.transitions);
  const auto back = nlohmann::json::parse(nlohmann::json(a).dump()).get<GrammarSpec>();
  EXPECT_EQ(back.transitions, a.transitions);
  EXPECT_EQ(back.leaning, a.leaning);
  EXPECT_EQ(back.seed, a.seed);
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(a));
}

TEST(Grammar, InvalidOptions) {
  GrammarOptions o;
  o.num_topics = 1;
  EXPECT_THROW(make_grammar(o, 1), InvalidArgument);
  o = {};
  o.min_len = 20;
  EXPECT_THROW(make_grammar(o, 1), InvalidArgument);
  o = {};
  o.support_size = 0;
  EXPECT_THROW(make_grammar(o, 1), InvalidArgument);
}

// ---------------------------------------------------------------------------
// Corpus

TEST(Corpus, DeterministicAndInRange) {
  const auto& g = grammar();
  const auto a = gen_pretrain_corpus(g, 500, 3);
  EXPECT_EQ(a, gen_pretrain_corpus(g, 500, 3));
  EXPECT_NE(a, gen_pretrain_corpus(g, 500, 4));
  std::size_t pairs = 0;
  for (const auto& s : a) {
    ASSERT_EQ(s.tokens.size(), s.types.size());
    EXPECT_LE(s.tokens.size(), 32u);
    for (auto t : s.tokens) {
      EXPECT_GE(t, 0);
      EXPECT_LT(t, static_cast<std::int32_t>(g.vocab_size()));
    }
    if (s.types.back() == 1) ++pairs;
  }
  EXPECT_GT(pairs, 200u);
  EXPECT_LT(pairs, 300u);
  EXPECT_THROW(gen_pretrain_corpus(g, 0, 1), InvalidArgument);
}

TEST(Corpus, BigramFrequenciesConvergeToTransitionTable) {
  const auto& g = grammar();
  const auto corpus = gen_pretrain_corpus(g, 100000, 11);
  const std::size_t V = g.vocab_size(), T = g.options.num_topics;
  std::vector<double> counts(T * V * V, 0.0), totals(T * V, 0.0);
  for (const auto& s : corpus) {
    const auto p = parse(g, s.tokens);
    auto add_chain = [&](std::int32_t prev, const std::vector<std::int32_t>& chain) {
      for (auto t : chain) {
        if (prev >= 0) {
          counts[(p.topic * V + static_cast<std::size_t>(prev)) * V + static_cast<std::size_t>(t)] += 1;
          totals[p.topic * V + static_cast<std::size_t>(prev)] += 1;
        }
        prev = t;
      }
    };
    add_chain(-1, p.a);
    if (!p.b.empty()) add_chain(p.a.back(), p.b);
  }
  // Rows of tokens a topic rarely visits keep binomial noise of a few points at this
  // corpus size, so the 0.01 bound applies to the visitation-weighted largest row
  // deviation and every single cell must sit within 5 standard errors.
  double weighted = 0.0, all = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t src = 0; src < V; ++src) {
      const double n = totals[t * V + src];
      if (n == 0) continue;
      double row_worst = 0.0;
      for (std::size_t dst = 0; dst < V; ++dst) {
        const double p = g.probability(t, static_cast<std::int32_t>(src), static_cast<std::int32_t>(dst));
        const double d = std::abs(counts[(t * V + src) * V + dst] / n - p);
        EXPECT_LE(d, 5 * std::sqrt(p * (1 - p) / n) + 1e-12) << "topic " << t << " " << src << "->" << dst;
        row_worst = std::max(row_worst, d);
      }
      weighted += n * row_worst;
      all += n;
    }
  }
  EXPECT_LT(weighted / all, 0.01);
}

// ---------------------------------------------------------------------------
// Tasks

class TaskTest : public ::testing::TestWithParam<Task> {};

TEST_P(TaskTest, BalancedDisjointAndWellFormed) {
  const auto& g = grammar();
  const auto ds = gen_task(GetParam(), g, 2000, 5);
  EXPECT_EQ(ds.train.size(), 2000u);
  EXPECT_EQ(ds.validation.size(), kValidationSize);
  for (const auto* split : {&ds.train, &ds.validation}) {
    double ones = 0;
    for (const auto& e : *split) {
      ones += e.label;
      ASSERT_EQ(e.tokens.size(), e.types.size());
      EXPECT_LE(e.tokens.size(), 32u);
      EXPECT_EQ(e.tokens.back(), kSepId);
      const bool is_pair = GetParam() == Task::toy_pair;
      EXPECT_EQ(e.types.back(), is_pair ? 1 : 0);
    }
    EXPECT_NEAR(ones / static_cast<double>(split->size()), 0.5, 0.02);
  }
  std::set<std::string> seen;
  for (const auto& e : ds.train) EXPECT_TRUE(seen.insert(key(e)).second);
  for (const auto& e : ds.validation) EXPECT_TRUE(seen.insert(key(e)).second);
}

TEST_P(TaskTest, DeterministicGeneration) {
  const auto a = gen_task(GetParam(), grammar(), 50, 9);
  const auto b = gen_task(GetParam(), grammar(), 50, 9);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.validation, b.validation);
  EXPECT_NE(a.train, gen_task(GetParam(), grammar(), 50, 10).train);
}

TEST_P(TaskTest, BayesRuleIsAtLeast95PercentAccurate) {
  const auto& g = grammar();
  const auto ds = gen_task(GetParam(), g, 10, 5);
  std::size_t correct = 0;
  for (const auto& e : ds.validation) {
    const auto p = parse(g, e.tokens);
    std::int32_t guess = 0;
    switch (GetParam()) {
      case Task::toy_sent: guess = bayes_sent(g, p); break;
      case Task::toy_pair: guess = bayes_pair(g, p); break;
      case Task::toy_accept: guess = bayes_accept(g, p); break;
    }
    correct += guess == e.label;
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(ds.validation.size());
  EXPECT_GE(acc, 0.95) << task_name(GetParam());
}

INSTANTIATE_TEST_SUITE_P(AllTasks, TaskTest, ::testing::ValuesIn(kAllTasks),
                         [](const auto& info) { return task_name(info.param).substr(4); });

TEST(Tasks, SentLabelFollowsPolarityMajority) {
  const auto& g = grammar();
  const auto ds = gen_task(Task::toy_sent, g, 3000, 1);
  std::size_t only_positive = 0;
  for (const auto& e : ds.train) {
    const auto p = parse(g, e.tokens);
    int pos = 0, neg = 0;
    for (auto t : p.a) {
      pos += g.is_positive(t);
      neg += g.is_negative(t);
    }
    ASSERT_NE(pos, neg);
    EXPECT_EQ(e.label, pos > neg ? 1 : 0);
    if (neg == 0) {
      ++only_positive;
      EXPECT_EQ(e.label, 1);
    }
  }
  EXPECT_GT(only_positive, 0u);
}

TEST(Tasks, SentMarginCap) {
  GrammarOptions o;
  o.sent_max_margin = 1;
  const auto g = make_grammar(o, 7);
  for (const auto& e : gen_task(Task::toy_sent, g, 200, 1).train) {
    const auto p = parse(g, e.tokens);
    int balance = 0;
    for (auto t : p.a) balance += g.is_positive(t) ? 1 : g.is_negative(t) ? -1 : 0;
    EXPECT_EQ(std::abs(balance), 1);
  }
}

TEST(Tasks, AcceptNegativesAlwaysViolateSupport) {
  const auto& g = grammar();
  const auto ds = gen_task(Task::toy_accept, g, 2000, 2);
  for (const auto& e : ds.train) {
    const auto p = parse(g, e.tokens);
    EXPECT_EQ(bayes_accept(g, p), e.label);
  }
}

TEST(Tasks, PairNegativesSwitchTopic) {
  const auto& g = grammar();
  const auto ds = gen_task(Task::toy_pair, g, 1000, 2);
  for (const auto& e : ds.train) {
    const auto p = parse(g, e.tokens);
    ASSERT_FALSE(p.b.empty());
    if (e.label == 1) EXPECT_GT(chain_probability(g, p.topic, p.a.back(), p.b), 0.0);
  }
}

TEST(Tasks, TooFewExamples) { EXPECT_THROW(gen_task(Task::toy_sent, grammar(), 9, 1), InvalidArgument); }

// ---------------------------------------------------------------------------
// Subsampling

TEST(Subsample, Properties) {
  const auto ds = gen_task(Task::toy_pair, grammar(), 6000, 3);
  std::set<std::string> pool;
  for (const auto& e : ds.train) pool.insert(key(e));
  const auto a = subsample(ds, 5000, 0, 42);
  const auto b = subsample(ds, 5000, 0, 42);
  const auto c = subsample(ds, 5000, 1, 42);
  const auto d = subsample(ds, 5000, 0, 43);
  EXPECT_EQ(a.train, b.train);
  EXPECT_NE(a.train, c.train);
  EXPECT_NE(a.train, d.train);
  EXPECT_EQ(a.validation, ds.validation);
  std::set<std::string> distinct;
  for (const auto& e : a.train) {
    distinct.insert(key(e));
    EXPECT_TRUE(pool.count(key(e)));
  }
  EXPECT_EQ(distinct.size(), 5000u);
  EXPECT_EQ(subsample(ds, 500, 0, 42).train.size(), 500u);
  EXPECT_THROW(subsample(ds, 6001, 0, 42), InvalidArgument);
}

TEST(Subsample, RoughlyUniform) {
  // Each example is drawn with probability size / n; count hits over many trials.
  const auto ds = gen_task(Task::toy_sent, grammar(), 100, 3);
  std::map<std::string, int> hits;
  const int trials = 2000;
  for (int t = 0; t < trials; ++t) {
    for (const auto& e : subsample(ds, 20, static_cast<std::uint64_t>(t), 5).train) ++hits[key(e)];
  }
  ASSERT_EQ(hits.size(), 100u);
  for (const auto& [k, n] : hits) {
    // Binomial(2000, 0.2): mean 400, sd ~17.9; 5 sd band.
    EXPECT_NEAR(n, 400, 90);
  }
}

// ---------------------------------------------------------------------------
// Files

TEST(Files, DatasetRoundTrip) {
  TempDir dir("data");
  const auto ds = gen_task(Task::toy_accept, grammar(), 30, 3);
  save_dataset(dir.path(), ds);
  const auto back = load_dataset(dir.path(), Task::toy_accept);
  EXPECT_EQ(back.train, ds.train);
  EXPECT_EQ(back.validation, ds.validation);
  std::ifstream in(dir / "toy-accept/train.jsonl");
  std::string line;
  std::getline(in, line);
  const auto j = nlohmann::json::parse(line);
  EXPECT_TRUE(j.contains("tokens") && j.contains("types") && j.contains("label"));
}

TEST(Files, CorpusRoundTrip) {
  TempDir dir("data");
  const auto corpus = gen_pretrain_corpus(grammar(), 40, 3);
  write_corpus_jsonl(dir / "c.jsonl", corpus);
  EXPECT_EQ(read_corpus_jsonl(dir / "c.jsonl"), corpus);
}

TEST(Files, MalformedLinesNameTheLine) {
  TempDir dir("data");
  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"tokens":[1,5,2],"types":[0,0,0],"label":1})" << "\n"
        << R"({"tokens":[1,5,2],"types":[0,0,0],"label":3})" << "\n";
  }
  try {
    read_examples_jsonl(dir / "bad.jsonl");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  {
    std::ofstream out(dir / "bad2.jsonl");
    out << "{not json\n";
  }
  EXPECT_THROW(read_corpus_jsonl(dir / "bad2.jsonl"), ParseError);
  EXPECT_THROW(read_examples_jsonl(dir / "missing.jsonl"), IoError);
}

TEST(Tasks, Names) {
  EXPECT_EQ(task_name(Task::toy_pair), "toy-pair");
  EXPECT_EQ(task_from_name("toy-accept"), Task::toy_accept);
  EXPECT_THROW(task_from_name("sst-2"), InvalidArgument);
}
