#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "relab/adam.hpp"
#include "relab/autodiff.hpp"
#include "test_util.hpp"

using namespace relab;
using relab::testing::gradient_check;
using relab::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-6;

// Random projection so that every output entry contributes to the loss with a
// distinct weight.
Var<double> project(Tape<double>& tape, Var<double> y, std::uint64_t seed = 99) {
  Rng rng(seed);
  auto w = tape.constant(random_tensor<double>(y.shape(), rng));
  return sum(mul(y, w));
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward values

TEST(Forward, SoftmaxOfZerosIsUniform) {
  Tape<double> tape;
  auto y = softmax(tape.constant(Tensor<double>({2}, {0.0, 0.0})));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(Forward, SoftmaxRowsAreDistributions) {
  Rng rng(1);
  Tape<float> tape;
  auto x = tape.constant(random_tensor<float>({7, 13}, rng, 10.0));
  auto y = softmax(x).value();
  for (std::size_t r = 0; r < 7; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 13; ++c) {
      EXPECT_GE(y.at(r, c), 0.0f);
      EXPECT_LE(y.at(r, c), 1.0f);
      total += y.at(r, c);
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Forward, SoftmaxOverLargeLogitsStaysFinite) {
  Tape<float> tape;
  auto y = softmax(tape.constant(Tensor<float>({3}, {1000.0f, 999.0f, -1000.0f}))).value();
  EXPECT_TRUE(y.all_finite());
  EXPECT_NEAR(y[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-6);
}

TEST(Forward, GeluFixedPointAndErfForm) {
  Tape<double> tape;
  auto y = gelu(tape.constant(Tensor<double>({3}, {0.0, 1.0, -2.0}))).value();
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 0.5 * (1.0 + std::erf(1.0 / std::numbers::sqrt2)), 1e-15);
  EXPECT_NEAR(y[2], -2.0 * 0.5 * (1.0 + std::erf(-2.0 / std::numbers::sqrt2)), 1e-15);
}

TEST(Forward, CrossEntropyUniformIsLn2) {
  Tape<double> tape;
  auto loss = cross_entropy(tape.constant(Tensor<double>({2}, {0.0, 0.0})), 0);
  EXPECT_NEAR(loss.value().item(), std::log(2.0), 1e-15);
}

TEST(Forward, CrossEntropyAveragesRows) {
  Tape<double> tape;
  const std::vector<std::int32_t> labels{1, 0};
  auto loss = cross_entropy(tape.constant(Tensor<double>({2, 2}, {0.0, 0.0, 3.0, 1.0})), labels);
  const double second = -std::log(std::exp(3.0) / (std::exp(3.0) + std::exp(1.0)));
  EXPECT_NEAR(loss.value().item(), (std::log(2.0) + second) / 2.0, 1e-14);
}

TEST(Forward, LayerNormMoments) {
  Rng rng(2);
  for (double spread : {1e-3, 1.0, 100.0}) {
    Tape<double> tape;
    auto x = tape.constant(random_tensor<double>({9, 24}, rng, spread));
    auto y = layer_norm(x, tape.constant(Tensor<double>::filled({24}, 1.0)), tape.constant(Tensor<double>({24})))
                 .value();
    for (std::size_t r = 0; r < 9; ++r) {
      double m = 0.0, v = 0.0;
      for (std::size_t c = 0; c < 24; ++c) m += y.at(r, c);
      m /= 24;
      for (std::size_t c = 0; c < 24; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
      v /= 24;
      EXPECT_LT(std::abs(m), 1e-6);
      EXPECT_NEAR(v, 1.0, 1e-4);
    }
  }
}

TEST(Forward, MatmulSmallExample) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto b = tape.constant(Tensor<double>({3, 2}, {7, 8, 9, 10, 11, 12}));
  auto c = matmul(a, b).value();
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(c.vec(), (std::vector<double>{58, 64, 139, 154}));
}

TEST(Forward, BroadcastAddAndMean) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto b = tape.constant(Tensor<double>({3}, {10, 20, 30}));
  EXPECT_EQ(add(a, b).value().vec(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_EQ(mean(a, 0).value().vec(), (std::vector<double>{2.5, 3.5, 4.5}));
  EXPECT_EQ(mean(a, 1).value().vec(), (std::vector<double>{2, 5}));
}

TEST(Forward, EmbeddingLookupGathersRows) {
  Tape<double> tape;
  auto table = tape.constant(Tensor<double>({3, 2}, {0, 1, 10, 11, 20, 21}));
  const std::vector<std::int32_t> ids{2, 0, 2};
  EXPECT_EQ(embedding_lookup(table, ids).value().vec(), (std::vector<double>{20, 21, 0, 1, 20, 21}));
}

TEST(Forward, AttentionRowsSumToOneWithinSegments) {
  Rng rng(3);
  Tape<double> tape;
  auto q = tape.constant(random_tensor<double>({7, 8}, rng));
  auto k = tape.constant(random_tensor<double>({7, 8}, rng));
  auto v = tape.constant(random_tensor<double>({7, 8}, rng));
  const std::vector<Segment> segs{{0, 3}, {3, 4}};
  std::vector<Tensor<double>> probs;
  attention(q, k, v, segs, 2, {}, &probs);
  ASSERT_EQ(probs.size(), 4u);
  for (const auto& p : probs) {
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) total += p.at(r, c);
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Forward, AttentionIgnoresMaskedKeys) {
  Rng rng(4);
  Tape<double> tape;
  auto q = tape.constant(random_tensor<double>({4, 4}, rng));
  auto k = tape.constant(random_tensor<double>({4, 4}, rng));
  auto v = tape.constant(random_tensor<double>({4, 4}, rng));
  const std::vector<Segment> segs{{0, 4}};
  const std::vector<std::uint8_t> valid{1, 1, 1, 0};
  std::vector<Tensor<double>> probs;
  attention(q, k, v, segs, 1, valid, &probs);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(probs[0].at(r, 3), 0.0);
}

// ---------------------------------------------------------------------------
// Errors

TEST(Errors, ShapeMismatchNamesOperands) {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2, 3}));
  auto b = tape.constant(Tensor<float>({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(a, tape.constant(Tensor<float>({2}))), ShapeError);
  EXPECT_THROW(mul(a, tape.constant(Tensor<float>({3, 2}))), ShapeError);
  EXPECT_THROW(softmax(a, 2), ShapeError);
}

TEST(Errors, OutOfRangeIds) {
  Tape<float> tape;
  auto table = tape.constant(Tensor<float>({3, 2}));
  const std::vector<std::int32_t> bad{3};
  EXPECT_THROW(embedding_lookup(table, bad), Error);
  EXPECT_THROW(cross_entropy(tape.constant(Tensor<float>({2})), 2), Error);
}

TEST(Errors, NonFiniteResultIsRejected) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1}, {1e300}));
  EXPECT_THROW(mul(x, x), NumericError);
}

TEST(Errors, BackwardNeedsScalarLoss) {
  Tape<double> tape;
  auto w = tape.parameter("w", Tensor<double>({2}, {1, 2}));
  EXPECT_THROW(tape.backward(w), ShapeError);
}

// ---------------------------------------------------------------------------
// Backward

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  auto w = tape.parameter("w", Tensor<double>({2, 2}, {1, -2, 3, 4}));
  auto g = tape.backward(sum(w));
  EXPECT_EQ(g.at("w").vec(), (std::vector<double>(4, 1.0)));
}

TEST(Backward, HalfSquaredNormGivesW) {
  Tape<double> tape;
  const Tensor<double> w0({3}, {0.5, -1.5, 2.0});
  auto w = tape.parameter("w", w0);
  auto g = tape.backward(scale(sum(mul(w, w)), 0.5));
  EXPECT_EQ(g.at("w").vec(), w0.vec());
}

TEST(Backward, UnreachedParameterGetsZeros) {
  Tape<double> tape;
  auto w = tape.parameter("w", Tensor<double>({2}, {1, 2}));
  tape.parameter("unused", Tensor<double>({3}, {1, 2, 3}));
  auto g = tape.backward(sum(w));
  EXPECT_EQ(g.at("unused").vec(), (std::vector<double>(3, 0.0)));
}

TEST(Backward, FanOutAccumulates) {
  Tape<double> tape;
  auto w = tape.parameter("w", Tensor<double>({1}, {3.0}));
  // loss = w + w*w + 2w  => dloss/dw = 1 + 2w + 2 = 9
  auto loss = sum(add(add(w, mul(w, w)), scale(w, 2.0)));
  EXPECT_DOUBLE_EQ(tape.backward(loss).at("w")[0], 9.0);
}

// ---------------------------------------------------------------------------
// Gradient checks against central differences (64-bit, h = 1e-5)

TEST(GradCheck, Matmul) {
  Rng rng(10);
  ParamMap<double> p{{"a", random_tensor<double>({3, 4}, rng)}, {"b", random_tensor<double>({4, 5}, rng)}};
  EXPECT_LT(gradient_check(p, [](auto& t, const auto& v) { return project(t, matmul(v.at("a"), v.at("b"))); }),
            kGradTol);
}

TEST(GradCheck, Transpose) {
  Rng rng(11);
  ParamMap<double> p{{"a", random_tensor<double>({3, 4}, rng)}};
  EXPECT_LT(gradient_check(p, [](auto& t, const auto& v) { return project(t, transpose(v.at("a"))); }), kGradTol);
}

TEST(GradCheck, AddSameShapeAndBroadcast) {
  Rng rng(12);
  ParamMap<double> p{{"a", random_tensor<double>({3, 4}, rng)},
                     {"b", random_tensor<double>({3, 4}, rng)},
                     {"c", random_tensor<double>({4}, rng)}};
  EXPECT_LT(gradient_check(p,
                           [](auto& t, const auto& v) {
                             return project(t, add(add(v.at("a"), v.at("b")), v.at("c")));
                           }),
            kGradTol);
}

TEST(GradCheck, MulAndScale) {
  Rng rng(13);
  ParamMap<double> p{{"a", random_tensor<double>({2, 5}, rng)}, {"b", random_tensor<double>({2, 5}, rng)}};
  EXPECT_LT(gradient_check(p,
                           [](auto& t, const auto& v) { return project(t, scale(mul(v.at("a"), v.at("b")), 0.7)); }),
            kGradTol);
}

TEST(GradCheck, Gelu) {
  Rng rng(14);
  ParamMap<double> p{{"x", random_tensor<double>({4, 6}, rng, 2.0)}};
  EXPECT_LT(gradient_check(p, [](auto& t, const auto& v) { return project(t, gelu(v.at("x"))); }), kGradTol);
}

TEST(GradCheck, SoftmaxBothAxes) {
  Rng rng(15);
  ParamMap<double> p{{"x", random_tensor<double>({3, 5}, rng)}};
  EXPECT_LT(gradient_check(p, [](auto& t, const auto& v) { return project(t, softmax(v.at("x"), -1)); }), kGradTol);
  EXPECT_LT(gradient_check(p, [](auto& t, const auto& v) { return project(t, softmax(v.at("x"), 0)); }), kGradTol);
}

TEST(GradCheck, LayerNorm) {
  Rng rng(16);
  ParamMap<double> p{{"x", random_tensor<double>({4, 8}, rng)},
                     {"gamma", random_tensor<double>({8}, rng)},
                     {"beta", random_tensor<double>({8}, rng)}};
  EXPECT_LT(gradient_check(p,
                           [](auto& t, const auto& v) {
                             return project(t, layer_norm(v.at("x"), v.at("gamma"), v.at("beta")));
                           }),
            kGradTol);
}

TEST(GradCheck, EmbeddingLookupWithRepeats) {
  Rng rng(17);
  ParamMap<double> p{{"table", random_tensor<double>({5, 3}, rng)}};
  const std::vector<std::int32_t> ids{4, 0, 4, 2, 4};
  EXPECT_LT(gradient_check(p, [&](auto& t, const auto& v) { return project(t, embedding_lookup(v.at("table"), ids)); }),
            kGradTol);
}

TEST(GradCheck, MeanAndSum) {
  Rng rng(18);
  ParamMap<double> p{{"x", random_tensor<double>({3, 4}, rng)}};
  EXPECT_LT(gradient_check(p, [](auto& t, const auto& v) { return project(t, mean(v.at("x"), 0)); }), kGradTol);
  EXPECT_LT(gradient_check(p, [](auto& t, const auto& v) { return project(t, mean(v.at("x"), 1)); }), kGradTol);
  EXPECT_LT(gradient_check(p, [](auto&, const auto& v) { return sum(mul(v.at("x"), v.at("x"))); }), kGradTol);
}

TEST(GradCheck, CrossEntropy) {
  Rng rng(19);
  ParamMap<double> p{{"logits", random_tensor<double>({4, 3}, rng)}, {"single", random_tensor<double>({3}, rng)}};
  const std::vector<std::int32_t> labels{2, 0, 1, 2};
  EXPECT_LT(gradient_check(p,
                           [&](auto&, const auto& v) {
                             return add(cross_entropy(v.at("logits"), labels), cross_entropy(v.at("single"), 1));
                           }),
            kGradTol);
}

TEST(GradCheck, SegmentMean) {
  Rng rng(20);
  ParamMap<double> p{{"x", random_tensor<double>({7, 3}, rng)}};
  const std::vector<Segment> segs{{0, 2}, {2, 4}, {6, 1}};
  EXPECT_LT(gradient_check(p, [&](auto& t, const auto& v) { return project(t, segment_mean(v.at("x"), segs)); }),
            kGradTol);
}

TEST(GradCheck, AttentionPackedWithPadding) {
  Rng rng(21);
  ParamMap<double> p{{"q", random_tensor<double>({7, 8}, rng)},
                     {"k", random_tensor<double>({7, 8}, rng)},
                     {"v", random_tensor<double>({7, 8}, rng)}};
  const std::vector<Segment> segs{{0, 4}, {4, 3}};
  const std::vector<std::uint8_t> valid{1, 1, 1, 0, 1, 1, 1};
  EXPECT_LT(gradient_check(p,
                           [&](auto& t, const auto& v) {
                             return project(t, attention(v.at("q"), v.at("k"), v.at("v"), segs, 2, valid));
                           }),
            kGradTol);
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  ParamMap<float> params{{"w", Tensor<float>({3}, {0.1f, -0.2f, 0.3f})}};
  const auto before = params.at("w");
  AdamState<float> state;
  adam_step(params, GradientMap<float>{{"w", Tensor<float>({3})}}, state);
  EXPECT_TRUE(bit_equal(params.at("w"), before));
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, FirstStepHasMagnitudeAlpha) {
  // After one step m_hat = g and v_hat = g^2, so the update is -alpha * g / (|g| + eps).
  for (double g : {1e-3, 0.5, -7.0}) {
    ParamMap<double> params{{"w", Tensor<double>::scalar(1.0)}};
    AdamState<double> state;
    state.default_learning_rate = 1e-3;
    adam_step(params, GradientMap<double>{{"w", Tensor<double>::scalar(g)}}, state);
    const double expected = 1.0 - 1e-3 * g / (std::abs(g) + 1e-8);
    EXPECT_NEAR(params.at("w").item(), expected, 1e-15) << "g=" << g;
  }
}

TEST(Adam, MatchesClosedFormOverSeveralSteps) {
  ParamMap<double> params{{"w", Tensor<double>::scalar(0.0)}};
  AdamState<double> state;
  state.default_learning_rate = 0.01;
  const double grads[] = {1.0, -2.0, 0.5};
  double m = 0, v = 0, w = 0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    adam_step(params, GradientMap<double>{{"w", Tensor<double>::scalar(g)}}, state);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    w -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(params.at("w").item(), w, 1e-14);
  }
}

TEST(Adam, PerParameterLearningRate) {
  ParamMap<double> params{{"a", Tensor<double>::scalar(0.0)}, {"b", Tensor<double>::scalar(0.0)}};
  AdamState<double> state;
  state.default_learning_rate = 2e-5;
  state.learning_rate["b"] = 1e-4;
  adam_step(params, GradientMap<double>{{"a", Tensor<double>::scalar(1.0)}, {"b", Tensor<double>::scalar(1.0)}},
            state);
  EXPECT_NEAR(params.at("a").item(), -2e-5, 1e-12);
  EXPECT_NEAR(params.at("b").item(), -1e-4, 1e-12);
}

TEST(Adam, NonFiniteGradientAbortsWithName) {
  ParamMap<float> params{{"layer.1.attn.query.weight", Tensor<float>({2}, {1, 2})}};
  const auto before = params.begin()->second;
  AdamState<float> state;
  try {
    adam_step(params, GradientMap<float>{{"layer.1.attn.query.weight", Tensor<float>({2}, {NAN, 0})}}, state);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.1.attn.query.weight"), std::string::npos);
  }
  EXPECT_TRUE(bit_equal(params.begin()->second, before));
  EXPECT_EQ(state.step, 0u);
}

TEST(Adam, IdenticalRunsAreBitIdentical) {
  auto run = [] {
    Rng rng(5);
    ParamMap<float> params{{"w", random_tensor<float>({16}, rng)}};
    AdamState<float> state;
    for (int step = 0; step < 20; ++step) {
      Tape<float> tape;
      auto vars = bind_params(tape, params, true);
      auto x = tape.constant(random_tensor<float>({16}, rng));
      adam_step(params, tape.backward(sum(mul(mul(vars.at("w"), x), vars.at("w")))), state);
    }
    return params.at("w");
  };
  EXPECT_TRUE(bit_equal(run(), run()));
}
