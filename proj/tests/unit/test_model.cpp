#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "plmix/corpus.hpp"
#include "plmix/errors.hpp"
#include "plmix/model.hpp"
#include "plmix/params.hpp"

using namespace plmix;

namespace {

Tensor2 random(std::size_t r, std::size_t c, Rng& rng) {
  Tensor2 t(r, c);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

LayeredFeatures random_features(std::size_t frames, const ModelConfig& c, Rng& rng) {
  LayeredFeatures f;
  for (int k = 0; k < c.ssl_layers; ++k) f.layers.push_back(random(frames, static_cast<std::size_t>(c.ssl_dim), rng));
  return f;
}

ModelConfig no_positions() {
  ModelConfig c;
  c.position_features = false;
  return c;
}

std::vector<int> ids_of(int language, std::initializer_list<int> local) {
  std::vector<int> out;
  for (int p : local) out.push_back(language * kPhonemeIdStride + p);
  return out;
}

double overfit(SynthModel& m, const Example& ex, int steps, double lr) {
  Adam opt({.lr = lr});
  for (int i = 0; i < steps; ++i) {
    m.params().zero_grad();
    forward_loss(m, ex);
    opt.step(m.params());
  }
  m.params().zero_grad();
  return forward_loss(m, ex, {}, false).total();
}

}  // namespace

TEST(PhonemeEncoder, Deterministic) {
  SynthModel m({}, 1);
  Rng rng(2);
  m.init_embedding(1, 6, rng);
  const auto ids = ids_of(1, {0, 3, 2, 5});
  EXPECT_TRUE(phn_encode(m, 1, ids).output.bit_equal(phn_encode(m, 1, ids).output));
}

TEST(PhonemeEncoder, PermutationEquivariantWithoutPositions) {
  SynthModel m(no_positions(), 1);
  Rng rng(2);
  m.init_embedding(1, 6, rng);
  const auto a = phn_encode(m, 1, ids_of(1, {1, 4})).output;
  const auto b = phn_encode(m, 1, ids_of(1, {4, 1})).output;
  for (std::size_t j = 0; j < a.cols(); ++j) {
    EXPECT_EQ(a(0, j), b(1, j));
    EXPECT_EQ(a(1, j), b(0, j));
  }
}

TEST(PhonemeEncoder, OutputShape) {
  SynthModel m({}, 1);
  Rng rng(3);
  m.init_embedding(1, 6, rng);
  for (int t = 0; t < 30; ++t) {
    const auto L = static_cast<std::size_t>(rng.uniform_int(1, 64));
    std::vector<int> ids;
    for (std::size_t i = 0; i < L; ++i) ids.push_back(kPhonemeIdStride + static_cast<int>(rng.uniform_int(0, 5)));
    const auto out = phn_encode(m, 1, ids).output;
    EXPECT_EQ(out.rows(), L);
    EXPECT_EQ(out.cols(), static_cast<std::size_t>(m.config().hidden));
  }
}

TEST(PhonemeEncoder, ForeignIdRejected) {
  SynthModel m({}, 1);
  Rng rng(3);
  m.init_embedding(1, 6, rng);
  EXPECT_THROW(phn_encode(m, 1, ids_of(1, {9})), VocabularyError);
  EXPECT_THROW(phn_encode(m, 1, ids_of(2, {0})), VocabularyError);
}

TEST(RepresentationEncoder, SingleSegmentIsTemporalMean) {
  SynthModel m({}, 4);
  Rng rng(5);
  const auto f = random_features(7, m.config(), rng);
  const std::vector<std::size_t> b = {7};
  const auto enc = rep_encode(m, f, b);
  ASSERT_EQ(enc.output.rows(), 1u);
  for (std::size_t j = 0; j < enc.output.cols(); ++j) {
    double s = 0.0;
    for (std::size_t t = 0; t < 7; ++t) s += enc.frame_output(t, j);
    EXPECT_NEAR(enc.output(0, j), s / 7.0, 1e-14);
  }
}

TEST(RepresentationEncoder, OneHotLayerWeightIgnoresOtherLayers) {
  SynthModel m({}, 4);
  auto& w = m.params()[m.index().rep_weights.W].value;
  for (std::size_t k = 0; k < w.size(); ++k) w.values()[k] = k == 2 ? 40.0 : -40.0;
  Rng rng(6);
  auto f = random_features(6, m.config(), rng);
  const std::vector<std::size_t> b = {2, 6};
  const auto base = rep_encode(m, f, b).output;
  for (std::size_t k : {0u, 1u, 3u}) f.layers[k] = random(6, f.dim(), rng);
  const auto perturbed = rep_encode(m, f, b).output;
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(base.values()[i], perturbed.values()[i], 1e-12);
  f.layers[2](0, 0) += 1.0;
  const auto moved = rep_encode(m, f, b).output;
  EXPECT_GT(std::abs(moved(0, 0) - base(0, 0)) + std::abs(moved(0, 1) - base(0, 1)), 1e-6);
}

TEST(RepresentationEncoder, SegmentMeansMatchNaiveLoop) {
  SynthModel m({}, 4);
  Rng rng(7);
  const auto f = random_features(11, m.config(), rng);
  const std::vector<std::size_t> b = {1, 4, 5, 11};
  const auto enc = rep_encode(m, f, b);
  std::size_t start = 0;
  for (std::size_t s = 0; s < b.size(); ++s) {
    for (std::size_t j = 0; j < enc.output.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t t = start; t < b[s]; ++t) acc += enc.frame_output(t, j);
      EXPECT_NEAR(enc.output(s, j), acc / static_cast<double>(b[s] - start), 1e-13);
    }
    start = b[s];
  }
}

TEST(Synthesis, UnitDurationsGiveOneFramePerPhoneme) {
  SynthModel m({}, 1);
  Rng rng(1);
  const auto c = random(5, 32, rng);
  EXPECT_EQ(synthesize(m, c, std::vector<int>(5, 1)).frames.rows(), 5u);
}

TEST(Synthesis, DoublingDurationsRepeatsRowsPairwise) {
  SynthModel m(no_positions(), 1);
  Rng rng(1);
  const auto c = random(4, 32, rng);
  const std::vector<int> d = {1, 2, 1, 3};
  const std::vector<int> d2 = {2, 4, 2, 6};
  const auto a = synthesize(m, c, d), b = synthesize(m, c, d2);
  ASSERT_EQ(b.frames.rows(), 2 * a.frames.rows());
  for (std::size_t t = 0; t < a.upsampled.rows(); ++t)
    for (std::size_t j = 0; j < a.upsampled.cols(); ++j) {
      EXPECT_EQ(b.upsampled(2 * t, j), a.upsampled(t, j));
      EXPECT_EQ(b.upsampled(2 * t + 1, j), a.upsampled(t, j));
    }
}

TEST(Synthesis, FrameCountEqualsDurationSum) {
  SynthModel m({}, 1);
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const auto L = static_cast<std::size_t>(rng.uniform_int(1, 20));
    std::vector<int> d;
    int total = 0;
    for (std::size_t i = 0; i < L; ++i) {
      d.push_back(static_cast<int>(rng.uniform_int(1, 8)));
      total += d.back();
    }
    const auto pass = synthesize(m, random(L, 32, rng), d);
    EXPECT_EQ(pass.frames.rows(), static_cast<std::size_t>(total));
    EXPECT_EQ(pass.frames.cols(), 16u);
    EXPECT_EQ(pass.log_duration.rows(), L);
  }
}

TEST(Durations, ZeroHeadUsesRoundedExpBias) {
  SynthModel m({}, 1);
  auto& W = m.params()[m.index().duration.W].value;
  auto& b = m.params()[m.index().duration.b].value;
  W.fill(0.0);
  Rng rng(2);
  const auto c = random(3, 32, rng);
  for (double bias : {0.0, 1.0, 1.5, 2.3, -3.0}) {
    b(0, 0) = bias;
    const int expected = std::max(1, static_cast<int>(std::lround(std::exp(bias))));
    for (int d : predict_durations(m, c)) EXPECT_EQ(d, expected) << bias;
  }
  b(0, 0) = -10.0;
  for (int d : predict_durations(m, c)) EXPECT_EQ(d, 1);
}

TEST(Durations, LearnsConstantDuration) {
  LanguageConfig lc;
  lc.noise = 0.0;
  const auto lang = gen_language(3, 1, lc);
  SynthModel m({}, 5);
  Rng rng(4);
  m.init_embedding(1, lang.inventory_size(), rng);
  std::vector<Utterance> train;
  for (std::uint64_t s = 0; s < 8; ++s) {
    auto u = gen_utterance(lang, s, 4, 8, s);
    train.push_back(render_utterance(lang, s, u.phonemes, std::vector<int>(u.length(), 4), s));
  }
  Adam opt({.lr = 1e-2});
  for (int step = 0; step < 300; ++step) {
    m.params().zero_grad();
    for (const auto& u : train) {
      Example ex;
      ex.language = 1;
      ex.phonemes = u.phonemes;
      ex.durations = u.durations;
      ex.target = &u.frames;
      forward_loss(m, ex);
    }
    opt.step(m.params());
  }
  for (std::uint64_t s = 100; s < 110; ++s) {
    const auto u = gen_utterance(lang, s, 4, 8);
    const auto c = phn_encode(m, 1, u.phonemes).output;
    for (int d : predict_durations(m, c)) EXPECT_EQ(d, 4);
  }
}

class Overfit : public ::testing::Test {
 protected:
  void SetUp() override {
    LanguageConfig lc;
    lc.noise = 0.0;
    lang = gen_language(3, 1, lc);
    // One duration per phoneme, so the target is a function of the segment content.
    const auto draft = gen_utterance(lang, 4, 4, 4);
    std::vector<int> d;
    for (int p : draft.phonemes) d.push_back(lang.min_duration[static_cast<std::size_t>(lang.local_id(p))]);
    utt = render_utterance(lang, 4, draft.phonemes, d, 5);
    SslConfig sc;
    sc.noise = 0.0;
    sc.nuisance_scale = 0.0;
    feats = SslSimulator(3, lang.frame_dim(), sc).features(utt);
  }
  ToyLanguage lang;
  Utterance utt;
  LayeredFeatures feats;
};

TEST_F(Overfit, PhonemeBranch) {
  SynthModel m({}, 6);
  Rng rng(1);
  m.init_embedding(1, lang.inventory_size(), rng);
  Example ex;
  ex.language = 1;
  ex.phonemes = utt.phonemes;
  ex.durations = utt.durations;
  ex.target = &utt.frames;
  EXPECT_LT(overfit(m, ex, 2000, 3e-3), 1e-3);
}

TEST_F(Overfit, RepresentationBranch) {
  SynthModel m({}, 6);
  Example ex;
  ex.language = 1;
  ex.phonemes = utt.phonemes;
  ex.durations = utt.durations;
  ex.target = &utt.frames;
  ex.features = &feats;
  ex.branch = Branch::Representation;
  EXPECT_LT(overfit(m, ex, 2000, 3e-3), 1e-3);
}

TEST_F(Overfit, ZeroMasksGiveZeroLossAndGradients) {
  SynthModel m({}, 6);
  Rng rng(1);
  m.init_embedding(1, lang.inventory_size(), rng);
  const std::vector<double> fm(utt.frame_count(), 0.0), dm(utt.length(), 0.0);
  Example ex;
  ex.language = 1;
  ex.phonemes = utt.phonemes;
  ex.durations = utt.durations;
  ex.target = &utt.frames;
  ex.features = &feats;
  ex.frame_mask = fm;
  ex.duration_mask = dm;
  const std::vector<Source> choice = {Source::FromPhn, Source::FromRepr, Source::FromPhn, Source::FromRepr};
  ex.choice = choice;
  m.params().zero_grad();
  EXPECT_EQ(forward_loss(m, ex).total(), 0.0);
  for (const auto& p : m.params().all())
    for (double g : p.grad.values()) EXPECT_EQ(g, 0.0) << p.name;
}

TEST_F(Overfit, OnlyTheFeedingEncoderReceivesGradient) {
  SynthModel m({}, 6);
  Rng rng(1);
  m.init_embedding(1, lang.inventory_size(), rng);
  Example ex;
  ex.language = 1;
  ex.phonemes = utt.phonemes;
  ex.durations = utt.durations;
  ex.target = &utt.frames;
  ex.features = &feats;
  auto touched = [&](const std::string& g) {
    for (const auto& p : m.params().all())
      if (p.group == g)
        for (double v : p.grad.values())
          if (v != 0.0) return true;
    return false;
  };
  m.params().zero_grad();
  forward_loss(m, ex);
  EXPECT_TRUE(touched(group::kPhonemeEncoder));
  EXPECT_FALSE(touched(group::kRepresentationEncoder));
  m.params().zero_grad();
  ex.branch = Branch::Representation;
  forward_loss(m, ex);
  EXPECT_FALSE(touched(group::kPhonemeEncoder));
  EXPECT_FALSE(touched(group::embedding(1)));
  EXPECT_TRUE(touched(group::kRepresentationEncoder));
}

TEST(MixRows, SelectsRowsByPlan) {
  Rng rng(1);
  const auto a = random(4, 3, rng), b = random(4, 3, rng);
  const std::vector<Source> plan = {Source::FromPhn, Source::FromRepr, Source::FromPhn, Source::FromRepr};
  const auto c = mix_rows(a, b, plan);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(c(i, j), i % 2 == 0 ? a(i, j) : b(i, j));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  SynthModel m({}, 9);
  Rng rng(1);
  m.init_embedding(2, 7, rng);
  m.metadata()["pretrain_p_repr"] = 0.5;
  const auto path = std::filesystem::temp_directory_path() / "plmix_model_test.ckpt";
  m.save(path);
  const auto back = SynthModel::load(path);
  ASSERT_EQ(back.params().all().size(), m.params().all().size());
  for (std::size_t i = 0; i < m.params().all().size(); ++i) {
    EXPECT_EQ(back.params()[i].name, m.params()[i].name);
    EXPECT_TRUE(back.params()[i].value.bit_equal(m.params()[i].value));
  }
  EXPECT_EQ(back.inventory(2), 7);
  EXPECT_EQ(back.pretrained_p_repr(), std::optional<double>(0.5));
  std::filesystem::remove(path);
}
