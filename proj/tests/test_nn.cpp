#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "domainshift/adam.hpp"
#include "domainshift/gradcheck.hpp"
#include "domainshift/losses.hpp"
#include "domainshift/nn.hpp"
#include "support.hpp"

using namespace domainshift;

namespace {

Vector random_vector(CounterRng& rng, Eigen::Index n, double scale = 1.0) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = scale * rng.normal();
  return v;
}

/// Finite-difference check of a vector -> scalar function against `grad`.
GradCheckReport check_vector_grad(const std::function<double(const Vector&)>& f, Vector x, const Vector& grad) {
  std::vector<double> params(x.data(), x.data() + x.size());
  std::vector<double> analytic(grad.data(), grad.data() + grad.size());
  return finite_diff_check(
      [&](std::span<const double> p) { return f(Eigen::Map<const Vector>(p.data(), static_cast<Eigen::Index>(p.size()))); },
      params, analytic, {}, GradCheckOptions{});
}

}  // namespace

// --- featurizer ----------------------------------------------------------------

TEST(InitFeaturizer, KaimingIsDeterministic) {
  const auto a = init_featurizer({4, 8, 3}, KaimingInit{}, 5);
  const auto b = init_featurizer({4, 8, 3}, KaimingInit{}, 5);
  const auto c = init_featurizer({4, 8, 3}, KaimingInit{}, 6);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  for (std::size_t i = 0; i < a.layer_count(); ++i) EXPECT_TRUE(a.bias(i).isZero(0.0));
}

TEST(InitFeaturizer, KaimingVarianceWidened) {
  // 100x100 layers give 10^4 weights each.
  const auto f = init_featurizer({100, 100, 100}, KaimingInit{}, 42);
  for (std::size_t i = 0; i < f.layer_count(); ++i) {
    const auto w = f.weight(i);
    const double mean = w.mean();
    const double var = (w.array() - mean).square().sum() / static_cast<double>(w.size() - 1);
    const double target = 2.0 / 100.0;
    EXPECT_NEAR(var, target, 0.2 * target) << "layer " << i;
    EXPECT_NEAR(mean, 0.0, 0.01);
  }
}

TEST(InitFeaturizer, SingleDimIsOneLinearMap) {
  const auto f = init_featurizer({4}, KaimingInit{}, 1);
  EXPECT_EQ(f.layer_count(), 1u);
  EXPECT_EQ(f.in_dim(), 4u);
  EXPECT_EQ(f.feat_dim(), 4u);
}

TEST(InitFeaturizer, FromWeightsRoundTrip) {
  testsupport::ScratchDir dir("ckpt");
  auto f = init_featurizer({4, 8, 3}, KaimingInit{}, 9);
  f.bias(0)(2) = 0.1 + 1e-17;  // exercises full-precision output
  LinearHead head(3, 2);
  kaiming_init(head, 9, "head");
  save_checkpoint({f, head}, dir / "c.json");
  EXPECT_TRUE(init_featurizer({4, 8, 3}, FromWeights{dir / "c.json"}, 0) == f);
  const auto loaded = load_checkpoint(dir / "c.json");
  ASSERT_TRUE(loaded.head.has_value());
  EXPECT_TRUE(*loaded.head == head);
  try {
    init_featurizer({4, 7, 3}, FromWeights{dir / "c.json"}, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
}

TEST(InitFeaturizer, CheckpointShapeErrors) {
  auto j = to_json(Checkpoint{ToyFeaturizer({2, 3}), std::nullopt});
  j["layers"][0]["w"].push_back({1.0, 2.0});
  EXPECT_THROW(checkpoint_from_json(j), Error);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.json"), Error);
}

TEST(Forward, ZeroWeightsGiveZero) {
  const ToyFeaturizer f({3, 5, 2});
  CounterRng rng(1);
  EXPECT_TRUE(f.forward(random_vector(rng, 3)).isZero(0.0));
}

TEST(Forward, IdentityLayer) {
  ToyFeaturizer f({4});
  f.weight(0).setIdentity();
  CounterRng rng(2);
  const Vector x = random_vector(rng, 4);
  EXPECT_EQ(f.forward(x), x);
}

TEST(Forward, MatchesLoopOracle) {
  auto f = init_featurizer({5, 7, 3}, KaimingInit{}, 3);
  CounterRng rng(3);
  for (std::size_t i = 0; i < f.layer_count(); ++i) f.bias(i) = random_vector(rng, f.bias(i).size(), 0.3);
  for (int trial = 0; trial < 20; ++trial) {
    const Vector x = random_vector(rng, 5);
    // Hand-written matmul + ReLU.
    std::vector<double> a(x.data(), x.data() + 5);
    for (std::size_t layer = 0; layer < 2; ++layer) {
      const auto w = f.weight(layer);
      std::vector<double> z(static_cast<std::size_t>(w.rows()));
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        double s = f.bias(layer)(r);
        for (Eigen::Index c = 0; c < w.cols(); ++c) s += w(r, c) * a[static_cast<std::size_t>(c)];
        z[static_cast<std::size_t>(r)] = layer == 0 ? std::max(s, 0.0) : s;
      }
      a = z;
    }
    const Vector out = f.forward(x);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(out(k), a[static_cast<std::size_t>(k)], 1e-12);
  }
}

TEST(Forward, DimensionMismatch) {
  const ToyFeaturizer f({3, 2});
  try {
    f.forward(Vector::Zero(4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimensionMismatch);
  }
}

TEST(Backward, MatchesFiniteDifferences) {
  auto f = init_featurizer({4, 6, 5, 3}, KaimingInit{}, 4);
  CounterRng rng(4);
  const Vector x = random_vector(rng, 4), w = random_vector(rng, 3);
  ForwardCache cache;
  f.forward(x, &cache);
  std::vector<double> grad(f.parameter_count(), 0.0);
  f.backward(cache, w, grad);
  std::vector<double> params(f.params().begin(), f.params().end());
  ToyFeaturizer probe = f;
  const auto report = finite_diff_check(
      [&](std::span<const double> p) {
        std::copy(p.begin(), p.end(), probe.params().begin());
        return w.dot(probe.forward(x));
      },
      params, grad, {}, GradCheckOptions{});
  EXPECT_LT(report.max_rel_error, 1e-6);
}

// --- losses --------------------------------------------------------------------

TEST(CrossEntropy, UniformLogits) {
  EXPECT_NEAR(cross_entropy(Vector::Constant(4, 0.7), 2), std::log(4.0), 1e-15);
  EXPECT_NEAR(cross_entropy(Vector::Constant(4, 0.7), 2), 1.386294, 1e-6);
}

TEST(CrossEntropy, LargeLogitIsStable) {
  Vector logits = Vector::Zero(5);
  logits(1) = 1000.0;
  const auto ce = cross_entropy_grad(logits, 1);
  EXPECT_TRUE(std::isfinite(ce.value));
  EXPECT_NEAR(ce.value, 0.0, 1e-12);
  EXPECT_TRUE(ce.grad.allFinite());
}

TEST(CrossEntropy, MatchesNaiveFormula) {
  CounterRng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector logits = random_vector(rng, 6, 3.0);
    const std::size_t label = rng.below(6);
    const double naive = -std::log(std::exp(logits(static_cast<Eigen::Index>(label))) / logits.array().exp().sum());
    EXPECT_NEAR(cross_entropy(logits, label), naive, 1e-10);
  }
}

TEST(CrossEntropy, Errors) {
  try {
    cross_entropy(Vector::Zero(3), 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::LabelOutOfRange);
  }
  EXPECT_THROW(cross_entropy(Vector::Zero(1), 0), Error);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  CounterRng rng(6);
  const Vector logits = random_vector(rng, 5);
  const auto g = cross_entropy_grad(logits, 3);
  EXPECT_LT(check_vector_grad([](const Vector& z) { return cross_entropy(z, 3); }, logits, g.grad).max_rel_error, 1e-6);
}

TEST(GroundingJs, EqualFeaturesGiveZeroAndZeroGradient) {
  CounterRng rng(7);
  const Vector f = random_vector(rng, 5);
  const auto g = grounding_js_grad(f, f);
  EXPECT_EQ(g.value, 0.0);
  EXPECT_TRUE(g.grad.isZero(0.0));
}

TEST(GroundingJs, TwoDimHandValue) {
  Vector a(2), b(2);
  a << 1.0, 0.0;
  b << 0.0, 1.0;
  const double hi = std::exp(1.0) / (std::exp(1.0) + 1.0), lo = 1.0 - hi;
  const double expected = hi * std::log2(hi / 0.5) + lo * std::log2(lo / 0.5);  // both halves equal
  EXPECT_NEAR(grounding_js(a, b), expected, 1e-15);
  EXPECT_NEAR(grounding_js(a, b), 0.16006, 1e-5);
}

TEST(GroundingJs, GradientMatchesFiniteDifferences) {
  CounterRng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Vector fs = random_vector(rng, 6), f = random_vector(rng, 6);
    for (auto norm : {FeatureNormalization::Softmax, FeatureNormalization::AnchoredSoftmax}) {
      for (double temperature : {1.0, 2.5}) {
        const auto g = grounding_js_grad(fs, f, temperature, norm);
        const auto report = check_vector_grad(
            [&](const Vector& z) { return grounding_js(fs, z, temperature, norm); }, f, g.grad);
        EXPECT_LT(report.max_rel_error, 1e-6);
      }
    }
  }
}

TEST(GroundingJs, SoftmaxIgnoresCommonOffsetButAnchoredDoesNot) {
  CounterRng rng(9);
  const Vector f = random_vector(rng, 4);
  const Vector shifted = f.array() + 3.0;
  EXPECT_NEAR(grounding_js(f, shifted), 0.0, 1e-15);
  EXPECT_GT(grounding_js(f, shifted, 1.0, FeatureNormalization::AnchoredSoftmax), 0.0);
}

TEST(GroundingJs, DimensionMismatch) {
  try {
    grounding_js(Vector::Zero(3), Vector::Zero(4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimensionMismatch);
  }
}

TEST(KlHead, EqualLogitsGiveZero) {
  CounterRng rng(10);
  const Vector z = random_vector(rng, 4);
  EXPECT_EQ(kl_head_regularizer(z, z), 0.0);
}

TEST(KlHead, HandValue) {
  Vector pre(2), dg(2);
  pre << std::log(2.0), 0.0;
  dg << 0.0, 0.0;
  const double expected = (2.0 / 3.0) * std::log(4.0 / 3.0) + (1.0 / 3.0) * std::log(2.0 / 3.0);
  EXPECT_NEAR(kl_head_regularizer(pre, dg), expected, 1e-15);
  EXPECT_NEAR(kl_head_regularizer(pre, dg), 0.056633, 1e-6);
}

TEST(KlHead, GradientMatchesFiniteDifferences) {
  CounterRng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Vector pre = random_vector(rng, 4), dg = random_vector(rng, 4);
    const auto g = kl_head_regularizer_grad(pre, dg);
    EXPECT_LT(check_vector_grad([&](const Vector& z) { return kl_head_regularizer(pre, z); }, dg, g.grad).max_rel_error,
              1e-6);
  }
}

TEST(KlHead, DimensionMismatch) {
  try {
    kl_head_regularizer(Vector::Zero(2), Vector::Zero(3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimensionMismatch);
  }
}

// --- Adam --------------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParameters) {
  std::vector<double> p{1.0, -2.0, 3.0};
  const auto before = p;
  AdamState state;
  adam_step(p, std::vector<double>(3, 0.0), state, {});
  EXPECT_EQ(p, before);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, FirstStepMatchesHandComputation) {
  std::vector<double> p{0.5, -1.0, 2.0, 0.0};
  const std::vector<double> g{0.3, -4.0, 1e-3, 2.0};
  const AdamConfig cfg{0.01, 0.9, 0.999, 1e-8};
  AdamState state;
  auto expected = p;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = (1 - 0.9) * g[i], v = (1 - 0.999) * g[i] * g[i];
    const double m_hat = m / (1 - 0.9), v_hat = v / (1 - 0.999);
    expected[i] -= 0.01 * m_hat / (std::sqrt(v_hat) + 1e-8);
  }
  adam_step(p, g, state, cfg);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_NEAR(p[i], expected[i], 1e-15);
    // Bias-corrected first step moves each coordinate by about lr.
    EXPECT_NEAR(std::abs(p[i] - std::vector<double>{0.5, -1.0, 2.0, 0.0}[i]), 0.01, 1e-6);
  }
}

TEST(Adam, Deterministic) {
  std::vector<double> a{1.0, 2.0}, b{1.0, 2.0};
  AdamState sa, sb;
  for (int i = 0; i < 5; ++i) {
    adam_step(a, std::vector<double>{0.1 * i, -0.2}, sa, {});
    adam_step(b, std::vector<double>{0.1 * i, -0.2}, sb, {});
  }
  EXPECT_EQ(a, b);
  EXPECT_EQ(sa, sb);
}

TEST(Adam, ShapeMismatch) {
  std::vector<double> p{1.0, 2.0};
  AdamState state;
  try {
    adam_step(p, std::vector<double>{1.0}, state, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
}

// --- finite-difference harness ----------------------------------------------------

TEST(FiniteDiffCheck, Quadratic) {
  std::vector<double> theta{0.3, -1.2, 2.5, 0.0, 7.0};
  const auto analytic = theta;
  const auto report = finite_diff_check(
      [](std::span<const double> p) {
        double s = 0.0;
        for (double x : p) s += 0.5 * x * x;
        return s;
      },
      theta, analytic, {{"a", 0, 2}, {"b", 2, 3}});
  EXPECT_LT(report.max_rel_error, 1e-9);
  ASSERT_EQ(report.blocks.size(), 2u);
  EXPECT_EQ(report.blocks[1].checked, 3u);
  EXPECT_TRUE(report.passed());
  EXPECT_EQ(theta, analytic);  // restored
}

TEST(FiniteDiffCheck, DetectsWrongGradient) {
  std::vector<double> theta{1.0, 2.0};
  const std::vector<double> wrong{1.0, 3.0};
  const auto report = finite_diff_check(
      [](std::span<const double> p) { return 0.5 * (p[0] * p[0] + p[1] * p[1]); }, theta, wrong, {});
  EXPECT_FALSE(report.passed());
  EXPECT_EQ(report.blocks[0].worst_index, 1u);
}

TEST(FiniteDiffCheck, SubsamplesCoordinates) {
  std::vector<double> theta(50, 1.0);
  const auto analytic = theta;
  GradCheckOptions opts;
  opts.max_coords_per_block = 7;
  const auto report = finite_diff_check(
      [](std::span<const double> p) {
        double s = 0.0;
        for (double x : p) s += 0.5 * x * x;
        return s;
      },
      theta, analytic, {}, opts);
  EXPECT_EQ(report.blocks[0].checked, 7u);
}

TEST(FiniteDiffCheck, Preconditions) {
  std::vector<double> theta{1.0};
  const std::vector<double> g{1.0};
  GradCheckOptions opts;
  opts.step = 0.0;
  try {
    finite_diff_check([](std::span<const double>) { return 0.0; }, theta, g, {}, opts);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::PreconditionFailed);
  }
  try {
    finite_diff_check([](std::span<const double> p) { return std::log(p[0] - 1.0); }, theta, g, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFiniteLoss);
  }
}
