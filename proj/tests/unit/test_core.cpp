#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "plmix/container.hpp"
#include "plmix/errors.hpp"
#include "plmix/gradcheck.hpp"
#include "plmix/gradsuite.hpp"
#include "plmix/losses.hpp"
#include "plmix/params.hpp"
#include "plmix/rng.hpp"
#include "plmix/tensor.hpp"

using namespace plmix;

namespace {

Tensor2 random(std::size_t r, std::size_t c, Rng& rng) {
  Tensor2 t(r, c);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

// Naive triple loop.
Tensor2 naive_affine(const Tensor2& x, const Tensor2& W, const Tensor2& b) {
  Tensor2 y(x.rows(), W.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < W.cols(); ++j) {
      double s = b(0, j);
      for (std::size_t k = 0; k < x.cols(); ++k) s += x(i, k) * W(k, j);
      y(i, j) = s;
    }
  return y;
}

}  // namespace

TEST(Affine, Identity) {
  const auto y = affine_forward(Tensor2::from_rows({{1, 2}}), Tensor2::from_rows({{1, 0}, {0, 1}}),
                                Tensor2::from_rows({{0, 0}}));
  EXPECT_EQ(y, Tensor2::from_rows({{1, 2}}));
}

TEST(Affine, HandArithmetic) {
  const auto y = affine_forward(Tensor2::from_rows({{1, 1}}), Tensor2::from_rows({{2}, {3}}), Tensor2::from_rows({{1}}));
  EXPECT_DOUBLE_EQ(y(0, 0), 6.0);
}

TEST(Affine, MatchesNaiveLoop) {
  Rng rng(3);
  const auto x = random(3, 4, rng), W = random(4, 2, rng), b = random(1, 2, rng);
  const auto y = affine_forward(x, W, b);
  const auto ref = naive_affine(x, W, b);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y.values()[i], ref.values()[i], 1e-12);
}

TEST(Affine, ShapeMismatchThrows) {
  EXPECT_THROW(affine_forward(Tensor2(2, 3), Tensor2(2, 2), Tensor2(1, 2)), DimensionError);
}

TEST(Softmax, Symmetric) {
  const auto p = softmax(std::vector<double>{0, 0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, Analytic) {
  const auto p = softmax(std::vector<double>{std::log(2.0), 0});
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeInputsDoNotOverflow) {
  const auto p = softmax(std::vector<double>{1000, 0});
  EXPECT_NEAR(p[0], 1.0, 1e-15);
  EXPECT_GE(p[1], 0.0);
  EXPECT_LT(p[1], 1e-300);
}

TEST(Softmax, ProbabilityVector) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(1 + t % 9);
    for (double& x : v) x = 50.0 * rng.normal();
    const auto p = softmax(v);
    double s = 0.0;
    for (double x : p) {
      EXPECT_GE(x, 0.0);
      s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Losses, ZeroWhenPredictionMatches) {
  Rng rng(1);
  const auto t = random(4, 3, rng);
  EXPECT_EQ(masked_mse(t, t, std::vector<double>{1, 0, 1, 1}).value, 0.0);
  EXPECT_EQ(duration_loss(Tensor2::from_rows({{std::log(3.0)}}), std::vector<int>{3}, std::vector<double>{1}).value, 0.0);
}

TEST(Losses, AllZeroMaskGivesZeroAndZeroGradient) {
  Rng rng(2);
  const auto a = random(4, 3, rng), b = random(4, 3, rng);
  const std::vector<double> mask(4, 0.0);
  const auto l = masked_mse(a, b, mask);
  EXPECT_EQ(l.value, 0.0);
  for (double g : l.grad.values()) EXPECT_EQ(g, 0.0);
  const auto d = duration_loss(random(4, 1, rng), std::vector<int>{1, 2, 3, 4}, mask);
  EXPECT_EQ(d.value, 0.0);
  for (double g : d.grad.values()) EXPECT_EQ(g, 0.0);
  const auto ce = cross_entropy(a, std::vector<int>{0, 1, 2, 0}, mask);
  EXPECT_EQ(ce.value, 0.0);
  for (double g : ce.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(Losses, HalfMaskEqualsLossOnKeptHalf) {
  Rng rng(4);
  const auto a = random(6, 3, rng), b = random(6, 3, rng);
  const std::vector<double> mask = {1, 0, 1, 0, 1, 0};
  double ss = 0.0;
  for (std::size_t i : {0u, 2u, 4u})
    for (std::size_t j = 0; j < 3; ++j) ss += (a(i, j) - b(i, j)) * (a(i, j) - b(i, j));
  EXPECT_NEAR(masked_mse(a, b, mask).value, ss / 9.0, 1e-14);
}

TEST(Losses, MaskedFrameTargetDoesNotAffectGradient) {
  Rng rng(6);
  const auto a = random(5, 2, rng);
  auto b = random(5, 2, rng);
  const std::vector<double> mask = {1, 1, 0, 1, 1};
  const auto g1 = masked_mse(a, b, mask).grad;
  b(2, 0) += 10.0;
  b(2, 1) -= 3.0;
  EXPECT_TRUE(masked_mse(a, b, mask).grad.bit_equal(g1));
}

TEST(Blocks, ResidualTanh) {
  const Tensor2 x = Tensor2::from_rows({{0.5, -1.0}});
  const Tensor2 W = Tensor2::from_rows({{1, 0}, {0, 1}});
  const auto y = block_forward(x, W, Tensor2(1, 2), nullptr);
  EXPECT_DOUBLE_EQ(y(0, 0), 0.5 + std::tanh(0.5));
  EXPECT_DOUBLE_EQ(y(0, 1), -1.0 + std::tanh(-1.0));
}

TEST(Upsample, RepeatsRows) {
  const auto x = Tensor2::from_rows({{1}, {2}});
  const auto y = upsample(x, std::vector<int>{2, 3});
  ASSERT_EQ(y.rows(), 5u);
  EXPECT_EQ(y, Tensor2::from_rows({{1}, {1}, {2}, {2}, {2}}));
  EXPECT_THROW(upsample(x, std::vector<int>{0, 1}), DurationError);
}

TEST(SegmentMean, NaiveOracle) {
  Rng rng(8);
  const auto f = random(9, 3, rng);
  const std::vector<std::size_t> b = {2, 3, 9};
  const auto m = segment_mean(f, b);
  std::size_t start = 0;
  for (std::size_t s = 0; s < b.size(); ++s) {
    for (std::size_t c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (std::size_t t = start; t < b[s]; ++t) acc += f(t, c);
      EXPECT_NEAR(m(s, c), acc / static_cast<double>(b[s] - start), 1e-14);
    }
    start = b[s];
  }
}

TEST(GradCheck, QuadraticHasExactGradient) {
  Rng rng(9);
  ParamStore s;
  s.add("theta", "g", random(3, 3, rng));
  const auto r = grad_check([](ParamStore& st, bool acc) {
    double v = 0.0;
    for (std::size_t i = 0; i < st[0].value.size(); ++i) {
      const double x = st[0].value.values()[i];
      v += 0.5 * x * x;
      if (acc) st[0].grad.values()[i] += x;
    }
    return v;
  }, s);
  EXPECT_LT(r.max_rel_error, 1e-8);
  EXPECT_EQ(r.coordinates, 9u);
}

TEST(GradCheck, DetectsWrongGradient) {
  ParamStore s;
  s.add("theta", "g", Tensor2::from_rows({{1.0, 2.0}}));
  const auto r = grad_check([](ParamStore& st, bool acc) {
    const double x = st[0].value(0, 0), y = st[0].value(0, 1);
    if (acc) {
      st[0].grad(0, 0) += 2 * x;
      st[0].grad(0, 1) += y;  // should be 2y
    }
    return x * x + y * y;
  }, s);
  EXPECT_GT(r.max_rel_error, 0.1);
  EXPECT_EQ(r.worst_index, 1u);
}

TEST(GradCheck, AffineSoftmaxCrossEntropy) {
  Rng rng(12);
  ParamStore s;
  s.add("W", "g", random(4, 3, rng));
  s.add("b", "g", random(1, 3, rng));
  const auto x = random(5, 4, rng);
  const std::vector<int> labels = {0, 2, 1, 1, 0};
  const auto r = grad_check([&](ParamStore& st, bool acc) {
    const auto logits = affine_forward(x, st[0].value, st[1].value);
    const auto ce = cross_entropy(logits, labels);
    if (acc) affine_backward(x, st[0].value, ce.grad, nullptr, st[0].grad, st[1].grad.values());
    return ce.value;
  }, s);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GradCheck, EveryRegisteredLayerPassesAcrossSeeds) {
  for (const auto& name : grad_case_names())
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const auto c = run_grad_case(name, seed);
      EXPECT_TRUE(c.pass()) << name << " seed " << seed << ": " << c.result.max_rel_error;
      EXPECT_GT(c.result.coordinates, 0u) << name;
    }
}

TEST(Rng, Deterministic) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(derive_seed(1, {2}), derive_seed(1, {3}));
  EXPECT_EQ(derive_seed(1, {2, 3}), derive_seed(1, {2, 3}));
}

TEST(Rng, UniformIntInRange) {
  Rng r(7);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 5000; ++i) {
    const auto v = r.uniform_int(0, 4);
    ASSERT_GE(v, 0);
    ASSERT_LE(v, 4);
    ++counts[static_cast<std::size_t>(v)];
  }
  for (int c : counts) EXPECT_NEAR(c, 1000, 150);
}

TEST(Params, UniformInitBounds) {
  Rng r(1);
  const auto t = uniform_init(20, 10, 16, r);
  for (double v : t.values()) {
    EXPECT_LE(std::abs(v), 0.25);
  }
}

TEST(Params, FrozenGroupsUntouchedByAdam) {
  Rng r(1);
  ParamStore s;
  s.add("a", "frozen", random(2, 2, r));
  s.add("b", "live", random(2, 2, r));
  const auto before = s.fingerprint("frozen");
  s.set_frozen("frozen", true);
  Adam opt({});
  for (int i = 0; i < 5; ++i) {
    s[0].grad.fill(1.0);
    s[1].grad.fill(1.0);
    opt.step(s);
  }
  EXPECT_EQ(s.fingerprint("frozen"), before);
  EXPECT_NE(s[1].value(0, 0), 0.0);
}

TEST(Params, IdenticalTrajectories) {
  auto run = [] {
    Rng r(3);
    ParamStore s;
    s.add("w", "g", random(3, 2, r));
    Adam opt({.lr = 0.01});
    for (int i = 0; i < 20; ++i) {
      for (std::size_t k = 0; k < s[0].value.size(); ++k) s[0].grad.values()[k] = 2 * s[0].value.values()[k];
      opt.step(s);
      s.zero_grad();
    }
    return s[0].value;
  };
  EXPECT_TRUE(run().bit_equal(run()));
}

TEST(Container, RoundTripIsBitExact) {
  Rng r(2);
  Container c("test-kind");
  c.header()["k"] = 3;
  auto t = random(3, 4, r);
  t(0, 0) = -0.0;
  c.put("t", t);
  c.put_ints("ints", std::vector<int>{1, -2, 3});
  c.put_u64("u", std::vector<std::uint64_t>{~0ULL, 5});
  const auto path = std::filesystem::temp_directory_path() / "plmix_container_test.bin";
  c.save(path);
  const auto d = Container::load(path, "test-kind");
  EXPECT_TRUE(d.tensor("t").bit_equal(t));
  EXPECT_EQ(d.ints("ints"), (std::vector<int>{1, -2, 3}));
  EXPECT_EQ(d.u64s("u")[0], ~0ULL);
  EXPECT_EQ(d.header().at("k"), 3);
  EXPECT_THROW(Container::load(path, "other-kind"), FormatError);
  std::filesystem::remove(path);
}

TEST(Container, MissingFileNamesPath) {
  try {
    Container::load("/nonexistent/dir/file.bin");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/file.bin"), std::string::npos);
  }
}
