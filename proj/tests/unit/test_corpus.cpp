#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "plmix/corpus.hpp"
#include "plmix/errors.hpp"
#include "plmix/metrics.hpp"
#include "plmix/rng.hpp"

using namespace plmix;

namespace {

SplitConfig small_split() {
  SplitConfig c;
  c.n_source_langs = 2;
  c.source_utterances = 10;
  c.n_shots = 4;
  c.unlabeled_minutes = 2.0;
  c.eval_size = 8;
  return c;
}

}  // namespace

TEST(Language, DeterministicFieldForField) {
  const LanguageConfig cfg;
  EXPECT_EQ(gen_language(7, 2, cfg), gen_language(7, 2, cfg));
  EXPECT_FALSE(gen_language(7, 2, cfg) == gen_language(8, 2, cfg));
}

TEST(Language, TwoPrototypesSeparated) {
  LanguageConfig cfg;
  cfg.phonemes = 2;
  cfg.frame_dim = 8;
  cfg.noise = 0.05;
  for (std::uint64_t s = 1; s <= 20; ++s) {
    const auto l = gen_language(s, 0, cfg);
    double d2 = 0.0;
    for (int j = 0; j < 8; ++j) {
      const double d = l.prototypes(0, j) - l.prototypes(1, j);
      d2 += d * d;
    }
    EXPECT_GT(std::sqrt(d2), 0.2);
  }
}

TEST(Language, DisjointIdRanges) {
  const LanguageConfig cfg;
  const auto a = gen_language(7, 0, cfg), b = gen_language(7, 1, cfg);
  for (int p = 0; p < a.inventory_size(); ++p) {
    EXPECT_TRUE(a.owns(a.global_id(p)));
    EXPECT_FALSE(b.owns(a.global_id(p)));
  }
  EXPECT_THROW(b.local_id(a.global_id(0)), VocabularyError);
}

TEST(Language, FrequenciesSumToOne) {
  const auto l = gen_language(3, 1, {});
  double s = 0.0;
  for (double f : l.frequency) s += f;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Utterance, NoiselessFramesEqualPrototypes) {
  LanguageConfig cfg;
  cfg.noise = 0.0;
  const auto l = gen_language(5, 0, cfg);
  const auto u = gen_utterance(l, 11, 4, 9);
  std::size_t t = 0;
  for (std::size_t i = 0; i < u.length(); ++i)
    for (int r = 0; r < u.durations[i]; ++r, ++t)
      for (int j = 0; j < l.frame_dim(); ++j)
        EXPECT_EQ(u.frames(t, static_cast<std::size_t>(j)),
                  l.prototypes(static_cast<std::size_t>(l.local_id(u.phonemes[i])), static_cast<std::size_t>(j)));
  EXPECT_EQ(t, u.frame_count());
}

TEST(Utterance, SinglePhoneme) {
  LanguageConfig cfg;
  cfg.noise = 0.0;
  const auto l = gen_language(5, 0, cfg);
  const auto u = render_utterance(l, 1, {l.global_id(2)}, {3}, 9);
  ASSERT_EQ(u.frame_count(), 3u);
  EXPECT_EQ(u.boundaries(), (std::vector<std::size_t>{3}));
  for (std::size_t j = 0; j < u.frames.cols(); ++j) {
    EXPECT_EQ(u.frames(0, j), u.frames(1, j));
    EXPECT_EQ(u.frames(1, j), u.frames(2, j));
  }
}

TEST(Utterance, NoImmediateRepeats) {
  const auto l = gen_language(5, 0, {});
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto u = gen_utterance(l, s, 2, 14);
    for (std::size_t i = 1; i < u.length(); ++i) EXPECT_NE(u.phonemes[i], u.phonemes[i - 1]);
  }
}

TEST(Utterance, DurationMeanMatchesDistribution) {
  const auto l = gen_language(5, 0, {});
  double empirical = 0.0, expected = 0.0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto u = gen_utterance(l, s, 6, 14);
    for (std::size_t i = 0; i < u.length(); ++i) {
      const int p = l.local_id(u.phonemes[i]);
      empirical += u.durations[i];
      expected += 0.5 * (l.min_duration[static_cast<std::size_t>(p)] + l.max_duration[static_cast<std::size_t>(p)]);
      EXPECT_GE(u.durations[i], l.min_duration[static_cast<std::size_t>(p)]);
      EXPECT_LE(u.durations[i], l.max_duration[static_cast<std::size_t>(p)]);
    }
  }
  EXPECT_NEAR(empirical / expected, 1.0, 0.05);
}

TEST(Ssl, DeterministicPerUtterance) {
  const auto l = gen_language(5, 0, {});
  const auto u = gen_utterance(l, 3, 4, 8, 77);
  const SslConfig cfg;
  const auto a = ssl_features(u, 9, cfg), b = ssl_features(u, 9, cfg);
  ASSERT_EQ(a.layers.size(), b.layers.size());
  for (std::size_t k = 0; k < a.layers.size(); ++k) EXPECT_TRUE(a.layers[k].bit_equal(b.layers[k]));
}

TEST(Ssl, ZeroFrameZeroNoiseGivesOffset) {
  SslConfig cfg;
  cfg.noise = 0.0;
  cfg.nuisance_scale = 0.0;
  const SslSimulator sim(9, 16, cfg);
  const Tensor2 zeros(5, 16);
  const auto f = sim.features(zeros, 1);
  const auto g = sim.features(Tensor2(1, 16), 2);
  ASSERT_EQ(f.layers.size(), static_cast<std::size_t>(cfg.layers));
  for (std::size_t k = 0; k < f.layers.size(); ++k)
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t j = 0; j < f.dim(); ++j) EXPECT_EQ(f.layers[k](t, j), g.layers[k](0, j));
}

TEST(Ssl, FrameCountAlignment) {
  const auto l = gen_language(5, 0, {});
  const SslSimulator sim(9, l.frame_dim(), {});
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto u = gen_utterance(l, s, 1, 20, s);
    const auto f = sim.features(u);
    for (const auto& layer : f.layers) EXPECT_EQ(layer.rows(), u.frame_count());
  }
}

TEST(Split, EvalPhonemesCoveredByLabeled) {
  LanguageConfig lc;
  lc.phonemes = 8;
  SplitConfig sc = small_split();
  sc.eval_size = 64;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto split = make_split(7, seed, sc, lc);
    ASSERT_EQ(split.target.size(), 4u);
    std::set<int> seen;
    for (const auto& u : split.target) seen.insert(u.phonemes.begin(), u.phonemes.end());
    for (const auto& u : split.eval)
      for (int p : u.phonemes) EXPECT_TRUE(seen.count(p)) << p;
  }
}

TEST(Split, ZeroMinutesGivesNoUnpaired) {
  SplitConfig sc = small_split();
  sc.unlabeled_minutes = 0.0;
  const auto split = make_split(7, 1, sc);
  EXPECT_TRUE(split.unpaired.empty());
  EXPECT_EQ(split.withheld.size(), 0u);
}

TEST(Split, UnpairedFrameBudget) {
  SplitConfig sc = small_split();
  sc.unlabeled_minutes = 15.0;
  const auto split = make_split(7, 2, sc);
  const double budget = 15.0 * 60.0 * sc.frames_per_second;
  ASSERT_FALSE(split.unpaired.empty());
  std::size_t total = 0;
  for (const auto& u : split.unpaired) total += u.frames.rows();
  EXPECT_EQ(total, split.unpaired_frames());
  EXPECT_GE(static_cast<double>(total), budget);
  EXPECT_LT(static_cast<double>(total - split.unpaired.back().frames.rows()), budget);
}

TEST(Split, SmallerBudgetIsPrefix) {
  SplitConfig a = small_split(), b = small_split();
  a.unlabeled_minutes = 1.0;
  b.unlabeled_minutes = 3.0;
  const auto sa = make_split(7, 3, a), sb = make_split(7, 3, b);
  ASSERT_LE(sa.unpaired.size(), sb.unpaired.size());
  for (std::size_t i = 0; i < sa.unpaired.size(); ++i) EXPECT_EQ(sa.unpaired[i], sb.unpaired[i]);
}

TEST(Split, PartitionIdsAndSourceIndependentOfRunSeed) {
  const auto a = make_split(7, 1, small_split()), b = make_split(7, 2, small_split());
  ASSERT_EQ(a.source.size(), b.source.size());
  for (std::size_t i = 0; i < a.source.size(); ++i) EXPECT_EQ(a.source[i], b.source[i]);
  for (const auto& u : a.target) EXPECT_EQ(partition_of(u.id), Partition::Target);
  for (const auto& u : a.unpaired) EXPECT_EQ(partition_of(u.id), Partition::Unpaired);
  for (const auto& u : a.eval) EXPECT_EQ(partition_of(u.id), Partition::Eval);
}

TEST(Split, SaveLoadRoundTrip) {
  const auto split = make_split(7, 4, small_split());
  const auto dir = std::filesystem::temp_directory_path() / "plmix_split_test";
  std::filesystem::remove_all(dir);
  save_split(split, dir);
  const auto back = load_split(dir);
  EXPECT_EQ(back.target_language, split.target_language);
  EXPECT_EQ(back.target, split.target);
  EXPECT_EQ(back.unpaired, split.unpaired);
  EXPECT_EQ(back.eval, split.eval);
  EXPECT_EQ(back.source, split.source);
  EXPECT_EQ(back.withheld, split.withheld);
  std::filesystem::remove_all(dir);
}

TEST(Split, MissingDirectoryNamesPath) {
  try {
    load_split("/nonexistent/corpus");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/corpus"), std::string::npos);
  }
}

TEST(Oracle, PrototypeRepeatsDecodeToOnePhoneme) {
  const auto l = gen_language(5, 0, {});
  Tensor2 f(5, static_cast<std::size_t>(l.frame_dim()));
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t j = 0; j < f.cols(); ++j) f(t, j) = l.prototypes(3, j);
  EXPECT_EQ(decode_oracle(f, l), (std::vector<int>{l.global_id(3)}));
}

TEST(Oracle, ExactOnNoisyGroundTruth) {
  const auto l = gen_language(5, 4, {});
  for (std::uint64_t s = 0; s < 300; ++s) {
    const auto u = gen_utterance(l, s, 6, 14);
    EXPECT_EQ(decode_oracle(u.frames, l), u.phonemes);
  }
}
