#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "relab/surgery.hpp"
#include "test_util.hpp"

using namespace relab;

namespace {

// A checkpoint whose layer norms are not at their (1, 0) initialization, so that
// resets are observable.
Checkpoint source_checkpoint(std::size_t L, std::uint64_t seed) {
  ModelConfig c;
  c.num_layers = L;
  auto ck = init_model(c, seed);
  Rng rng(seed + 1000);
  for (auto& [name, t] : ck.params) {
    if (!is_layer_norm_param(name)) continue;
    for (auto& x : t.data()) x = static_cast<float>((name.ends_with("gamma") ? 1.0 : 0.0) + 0.1 * rng.normal());
  }
  return ck;
}

std::set<std::size_t> expected_reinit_layers(const SurgeryPlan& p, std::size_t L) {
  std::set<std::size_t> out;
  for (std::size_t i = 1; i <= L; ++i) {
    const bool in_block = i >= p.start && i <= p.start + p.length - 1;
    switch (p.kind) {
      case SurgeryKind::progressive: if (i > p.k) out.insert(i); break;
      case SurgeryKind::block_reinit: if (in_block) out.insert(i); break;
      case SurgeryKind::block_preserve: if (!in_block) out.insert(i); break;
      case SurgeryKind::single_layer: if (i == p.k) out.insert(i); break;
      default: break;
    }
  }
  return out;
}

SurgeryPlan random_plan(Rng& rng, std::size_t L) {
  SurgeryPlan p;
  switch (rng.uniform_int(6)) {
    case 0: p = SurgeryPlan::identity(); break;
    case 1: p = SurgeryPlan::progressive(rng.uniform_int(L + 1)); break;
    case 2: p = SurgeryPlan::block_reinit(1 + rng.uniform_int(L - 2)); break;
    case 3: p = SurgeryPlan::block_preserve(1 + rng.uniform_int(L - 2)); break;
    case 4: p = SurgeryPlan::single_layer(1 + rng.uniform_int(L)); break;
    default: {
      std::vector<std::size_t> perm(L);
      for (std::size_t i = 0; i < L; ++i) perm[i] = i + 1;
      rng.shuffle(perm);
      p = SurgeryPlan::permute(perm);
    }
  }
  p.preserve_layer_norm = rng.bernoulli(0.5);
  p.zero_biases = rng.bernoulli(0.3);
  p.seed = rng.next_u64();
  return p;
}

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2 * std::numbers::pi); }
double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace

// ---------------------------------------------------------------------------
// Truncated normal

TEST(TruncatedNormal, MillionSamplesMatchClosedFormMoments) {
  Rng rng(2024);
  const ReinitDistribution dist;
  const auto t = sample_truncated_normal(dist, {1000, 1000}, rng);
  double sum = 0, sum2 = 0;
  for (float x : t.data()) {
    ASSERT_GT(x, -0.04f);
    ASSERT_LT(x, 0.04f);
    sum += x;
  }
  const double mean = sum / 1e6;
  for (float x : t.data()) sum2 += (x - mean) * (x - mean);
  const double sd = std::sqrt(sum2 / (1e6 - 1));
  // Variance of N(0, s^2) truncated to (-2s, 2s): s^2 (1 - 4 phi(2) / (Phi(2) - Phi(-2))).
  const double oracle = 0.02 * std::sqrt(1 - 4 * normal_pdf(2) / (normal_cdf(2) - normal_cdf(-2)));
  EXPECT_NEAR(oracle, 0.01759, 1e-5);
  EXPECT_LT(std::abs(mean), 1e-4);
  EXPECT_GE(sd, 0.0174);
  EXPECT_LE(sd, 0.0178);
  EXPECT_NEAR(sd, oracle, 6e-5);
}

TEST(TruncatedNormal, AsymmetricWindowStaysInside) {
  Rng rng(1);
  const ReinitDistribution dist{0.01, 0.05, -0.02, 0.03};
  const auto t = sample_truncated_normal(dist, {5000}, rng);
  for (float x : t.data()) {
    EXPECT_GT(x, -0.02f);
    EXPECT_LT(x, 0.03f);
  }
}

TEST(TruncatedNormal, InvalidDistribution) {
  EXPECT_THROW((ReinitDistribution{0.0, 0.0, -1.0, 1.0}.validate()), InvalidArgument);
  EXPECT_THROW((ReinitDistribution{0.0, 1.0, 1.0, -1.0}.validate()), InvalidArgument);
  EXPECT_THROW((ReinitDistribution{2.0, 1.0, -1.0, 1.0}.validate()), InvalidArgument);
}

// ---------------------------------------------------------------------------
// Plans

TEST(Plan, Validation) {
  EXPECT_THROW(SurgeryPlan::progressive(7).validate(6), InvalidArgument);
  EXPECT_NO_THROW(SurgeryPlan::progressive(6).validate(6));
  EXPECT_THROW(SurgeryPlan::block_reinit(5).validate(6), InvalidArgument);
  EXPECT_THROW(SurgeryPlan::block_preserve(0).validate(6), InvalidArgument);
  EXPECT_NO_THROW(SurgeryPlan::block_preserve(4).validate(6));
  EXPECT_THROW(SurgeryPlan::single_layer(0).validate(6), InvalidArgument);
  EXPECT_THROW(SurgeryPlan::permute({1, 2, 2}).validate(3), InvalidArgument);
  EXPECT_THROW(SurgeryPlan::permute({1, 2}).validate(3), InvalidArgument);
  EXPECT_THROW(SurgeryPlan::permute({0, 1, 2}).validate(3), InvalidArgument);
  EXPECT_THROW(apply_surgery(source_checkpoint(6, 1), SurgeryPlan::progressive(9)), InvalidArgument);
}

TEST(Plan, JsonRoundTrip) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto p = random_plan(rng, 6);
    const auto back = nlohmann::json(p).get<SurgeryPlan>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(p));
  }
  EXPECT_THROW((nlohmann::json{{"kind", "progressive"}, {"kk", 1}}.get<SurgeryPlan>()), InvalidArgument);
  EXPECT_THROW((nlohmann::json{{"kind", "shuffle"}}.get<SurgeryPlan>()), InvalidArgument);
}

TEST(Plan, BlockStarts) {
  EXPECT_EQ(block_starts(6), (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(block_starts(12).size(), 10u);
  EXPECT_EQ(block_starts(12, 3, 3), (std::vector<std::size_t>{1, 4, 7, 10}));
  EXPECT_TRUE(block_starts(2).empty());
}

// ---------------------------------------------------------------------------
// Named examples

TEST(Apply, ProgressiveFullIsIdentity) {
  const auto ck = source_checkpoint(6, 2);
  const auto r = apply_surgery(ck, SurgeryPlan::progressive(6, 77));
  EXPECT_TRUE(bit_equal(r.checkpoint, ck));
  EXPECT_TRUE(r.report.reinitialized.empty());
}

TEST(Apply, ProgressiveZeroResetsEveryLayer) {
  const auto ck = source_checkpoint(6, 2);
  const auto r = apply_surgery(ck, SurgeryPlan::progressive(0, 77));
  for (const auto& [name, t] : ck.params) {
    if (is_embedding_param(name)) {
      EXPECT_TRUE(bit_equal(r.checkpoint.params.at(name), t)) << name;
    } else {
      EXPECT_FALSE(bit_equal(r.checkpoint.params.at(name), t)) << name;
    }
  }
  EXPECT_EQ(r.report.reinitialized.size(), 6u * 16u);
}

TEST(Apply, TwelveLayerBlockReinitAtFour) {
  const auto ck = source_checkpoint(12, 4);
  const auto r = apply_surgery(ck, SurgeryPlan::block_reinit(4, 9));
  for (const auto& [name, t] : ck.params) {
    const auto layer = layer_of(name);
    const bool changed = !bit_equal(r.checkpoint.params.at(name), t);
    EXPECT_EQ(changed, layer >= 4 && layer <= 6) << name;
  }
}

TEST(Apply, IdentityPermutationAndRoundTrip) {
  const auto ck = source_checkpoint(6, 5);
  EXPECT_TRUE(bit_equal(apply_surgery(ck, SurgeryPlan::permute({1, 2, 3, 4, 5, 6})).checkpoint, ck));
  for (std::uint64_t n = 0; n < 10; ++n) {
    const auto perm = derive_permutation(17, n, 6);
    const auto moved = apply_surgery(ck, SurgeryPlan::permute(perm)).checkpoint;
    const auto back = apply_surgery(moved, SurgeryPlan::permute(invert_permutation(perm))).checkpoint;
    EXPECT_TRUE(bit_equal(back, ck));
  }
}

TEST(Apply, PermutationMovesWholeLayers) {
  const auto ck = source_checkpoint(6, 6);
  const std::vector<std::size_t> perm{3, 1, 2, 6, 5, 4};
  const auto r = apply_surgery(ck, SurgeryPlan::permute(perm));
  for (std::size_t i = 1; i <= 6; ++i) {
    for (const auto& name : layer_param_names(i)) {
      EXPECT_TRUE(bit_equal(r.checkpoint.params.at(with_layer(name, perm[i - 1])), ck.params.at(name))) << name;
    }
  }
  EXPECT_EQ(r.report.moved.size(), 5u * 16u);  // layer 5 stays put
  EXPECT_TRUE(r.report.reinitialized.empty());
}

TEST(Apply, LayerNormOptions) {
  const auto ck = source_checkpoint(6, 7);
  auto plan = SurgeryPlan::single_layer(2, 3);
  const auto reset = apply_surgery(ck, plan).checkpoint;
  for (float x : reset.params.at("layer.2.attn.ln.gamma").data()) EXPECT_EQ(x, 1.0f);
  for (float x : reset.params.at("layer.2.ffn.ln.beta").data()) EXPECT_EQ(x, 0.0f);
  plan.preserve_layer_norm = true;
  const auto kept = apply_surgery(ck, plan);
  EXPECT_TRUE(bit_equal(kept.checkpoint.params.at("layer.2.attn.ln.gamma"), ck.params.at("layer.2.attn.ln.gamma")));
  EXPECT_EQ(kept.report.reinitialized.size(), 12u);
  // Sampled weights do not depend on the layer-norm option.
  EXPECT_TRUE(bit_equal(kept.checkpoint.params.at("layer.2.ffn.output.weight"),
                        reset.params.at("layer.2.ffn.output.weight")));
}

TEST(Apply, ZeroBiasesOption) {
  const auto ck = source_checkpoint(6, 8);
  auto plan = SurgeryPlan::single_layer(5, 3);
  plan.zero_biases = true;
  const auto out = apply_surgery(ck, plan).checkpoint;
  for (float x : out.params.at("layer.5.attn.value.bias").data()) EXPECT_EQ(x, 0.0f);
  EXPECT_FALSE(bit_equal(out.params.at("layer.5.attn.value.weight"), ck.params.at("layer.5.attn.value.weight")));
}

TEST(Apply, SeedDeterminesDraws) {
  const auto ck = source_checkpoint(6, 9);
  const auto a = apply_surgery(ck, SurgeryPlan::progressive(2, 1)).checkpoint;
  const auto b = apply_surgery(ck, SurgeryPlan::progressive(2, 1)).checkpoint;
  const auto c = apply_surgery(ck, SurgeryPlan::progressive(2, 2)).checkpoint;
  EXPECT_TRUE(bit_equal(a, b));
  EXPECT_FALSE(bit_equal(a, c));
}

// ---------------------------------------------------------------------------
// Randomized plans

TEST(Apply, RandomizedPlanProperties) {
  const std::size_t L = 6;
  const auto ck = source_checkpoint(L, 10);
  const auto names = canonical_names(ck.config);
  Rng rng(11);
  std::map<SurgeryKind, int> seen;
  for (int trial = 0; trial < 200; ++trial) {
    const auto plan = random_plan(rng, L);
    ++seen[plan.kind];
    SCOPED_TRACE(nlohmann::json(plan).dump());
    const auto r = apply_surgery(ck, plan);
    const auto& out = r.checkpoint.params;
    r.checkpoint.validate();

    // Every output parameter accounted for exactly once.
    std::multiset<std::string> covered(r.report.preserved.begin(), r.report.preserved.end());
    covered.insert(r.report.reinitialized.begin(), r.report.reinitialized.end());
    std::set<std::string> sources;
    for (const auto& [from, to] : r.report.moved) {
      covered.insert(to);
      EXPECT_TRUE(sources.insert(from).second) << from;
    }
    EXPECT_EQ(covered, std::multiset<std::string>(names.begin(), names.end()));

    for (const auto& name : names) {
      if (is_embedding_param(name)) EXPECT_TRUE(bit_equal(out.at(name), ck.params.at(name))) << name;
    }
    for (const auto& name : r.report.preserved) EXPECT_TRUE(bit_equal(out.at(name), ck.params.at(name))) << name;
    for (const auto& [from, to] : r.report.moved) EXPECT_TRUE(bit_equal(out.at(to), ck.params.at(from))) << to;

    const auto layers = expected_reinit_layers(plan, L);
    std::set<std::string> expected;
    for (auto i : layers) {
      for (const auto& name : layer_param_names(i)) {
        if (!(plan.preserve_layer_norm && is_layer_norm_param(name))) expected.insert(name);
      }
    }
    EXPECT_EQ(std::set<std::string>(r.report.reinitialized.begin(), r.report.reinitialized.end()), expected);

    for (const auto& name : r.report.reinitialized) {
      const auto& t = out.at(name);
      if (is_layer_norm_param(name)) {
        const float want = name.ends_with("gamma") ? 1.0f : 0.0f;
        for (float x : t.data()) ASSERT_EQ(x, want) << name;
      } else if (plan.zero_biases && name.ends_with(".bias")) {
        for (float x : t.data()) ASSERT_EQ(x, 0.0f) << name;
      } else {
        EXPECT_FALSE(bit_equal(t, ck.params.at(name))) << name;
        for (float x : t.data()) {
          ASSERT_GT(x, -0.04f) << name;
          ASSERT_LT(x, 0.04f) << name;
        }
      }
    }
    EXPECT_TRUE(bit_equal(apply_surgery(ck, plan).checkpoint, r.checkpoint));
  }
  EXPECT_EQ(seen.size(), 6u);
}

// ---------------------------------------------------------------------------
// Permutations

TEST(Permutation, DerivedPermutations) {
  std::set<std::vector<std::size_t>> distinct;
  for (std::uint64_t n = 0; n < 10; ++n) {
    auto p = derive_permutation(42, n, 12);
    EXPECT_EQ(p, derive_permutation(42, n, 12));
    auto sorted = p;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(sorted[i], i + 1);
    distinct.insert(p);
  }
  EXPECT_EQ(distinct.size(), 10u);
  EXPECT_NE(derive_permutation(42, 0, 12), derive_permutation(43, 0, 12));
}

TEST(Permutation, Inverse) {
  const std::vector<std::size_t> p{2, 4, 1, 3};
  const auto inv = invert_permutation(p);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(inv[p[i] - 1], i + 1);
}

TEST(Seeds, DeriveSeedIsStable) {
  // splitmix64(fnv1a64(key) ^ splitmix64(master)), spelled out independently.
  auto fnv = [](std::string_view s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    return h;
  };
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  EXPECT_EQ(derive_seed(5, "perm/3"), mix(fnv("perm/3") ^ mix(5)));
  EXPECT_NE(derive_seed(5, "perm/3"), derive_seed(5, "perm/4"));
  EXPECT_NE(derive_seed(5, "perm/3"), derive_seed(6, "perm/3"));
}
