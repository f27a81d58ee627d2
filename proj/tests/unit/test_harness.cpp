#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "plmix/harness.hpp"

using namespace plmix;
using nlohmann::json;

namespace {

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.seeds = {1, 2};
  c.split.n_source_langs = 2;
  c.split.source_utterances = 30;
  c.split.eval_size = 8;
  c.pretrain.steps = 40;
  c.generator.steps = 5;
  c.classifier.steps = 30;
  c.finetune.steps = 15;
  c.grid.table_minutes = 1.0;
  c.grid.table2_ratios = {0.5, 1.0};
  c.grid.table4_ratios = {0.5};
  c.grid.alphas = {0.9, 1.0};
  c.grid.asr_shots = {4, 8};
  c.grid.fig3_shots = {4};
  c.grid.fig3_minutes = {0.0, 1.0};
  return c;
}

std::vector<std::string> issues_of(const json& j) {
  try {
    parse_experiment_config(j);
  } catch (const ConfigIssues& e) {
    return e.issues();
  }
  return {};
}

bool mentions(const std::vector<std::string>& issues, const std::string& path) {
  return std::any_of(issues.begin(), issues.end(), [&](const std::string& s) { return s.rfind(path + ":", 0) == 0; });
}

std::vector<std::string> header_of(const std::string& csv) {
  std::vector<std::string> cols;
  std::stringstream line(csv.substr(0, csv.find('\n')));
  for (std::string c; std::getline(line, c, ',');) cols.push_back(c);
  return cols;
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig c;
  const auto back = parse_experiment_config(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, PartialOverridesKeepDefaults) {
  const auto c = parse_experiment_config({{"format_version", 1}, {"seeds", {3, 4}}, {"pretrain", {{"steps", 10}}}});
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 4}));
  EXPECT_EQ(c.pretrain.steps, 10);
  EXPECT_EQ(c.pretrain.p_repr, PretrainConfig{}.p_repr);
}

TEST(Config, FormatVersionRequired) {
  EXPECT_TRUE(mentions(issues_of(json::object()), "format_version"));
  EXPECT_TRUE(mentions(issues_of({{"format_version", 2}}), "format_version"));
}

TEST(Config, UnknownFieldsAndWrongTypesNamed) {
  const auto issues = issues_of({{"format_version", 1}, {"model", {{"hiden", 8}}}, {"seeds", "all"}});
  EXPECT_TRUE(mentions(issues, "model.hiden"));
  EXPECT_TRUE(mentions(issues, "seeds"));
  EXPECT_GE(issues.size(), 2u);
}

TEST(Config, RangeProblemsNamed) {
  const auto issues = issues_of({{"format_version", 1},
                                 {"model", {{"frame_dim", 8}}},
                                 {"pretrain", {{"p_repr", 0.0}}},
                                 {"grid", {{"table2_ratios", {0.5, 1.5}}}}});
  EXPECT_TRUE(mentions(issues, "model.frame_dim"));
  EXPECT_TRUE(mentions(issues, "pretrain.p_repr"));
  EXPECT_TRUE(mentions(issues, "grid.table2_ratios[1]"));
}

TEST(Config, StrategyNamesValidated) {
  const auto issues = issues_of({{"format_version", 1},
                                 {"finetune", {{"strategy", {{"kind", "mystery"}}}}},
                                 {"grid", {{"table2_combos", {{{"mix_pretrain", false}, {"strategy", "phoneme_mix"}}}},
                                           {"table4_kinds", {"phoneme_filter"}}}}});
  EXPECT_TRUE(mentions(issues, "finetune.strategy.kind"));
  EXPECT_TRUE(mentions(issues, "grid.table2_combos[0]"));
  EXPECT_TRUE(mentions(issues, "grid.table4_kinds[0]"));
}

TEST(Config, MissingFileNamesPath) {
  try {
    load_experiment_config("/nonexistent/config.json");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/config.json"), std::string::npos);
  }
}

TEST(Cells, GridShapes) {
  const auto c = tiny();
  EXPECT_EQ(suite_cells(SuiteName::Table2, c).size(), 6u * 2u);
  // HardMix per ratio, SoftMix per ratio and alpha, one Sampling cell.
  EXPECT_EQ(suite_cells(SuiteName::Table4, c).size(), 1u + 2u + 1u);
  EXPECT_EQ(suite_cells(SuiteName::Table5, c).size(), 2u * 2u);
  const auto fig3 = suite_cells(SuiteName::Fig3, c);
  // 0 minutes: Proposed* only; 1 minute: all three methods.
  EXPECT_EQ(fig3.size(), 1u + 3u);
  for (const auto& cell : fig3)
    if (cell.minutes == 0.0) EXPECT_EQ(cell.method, "Proposed*");
}

TEST(Cells, SuiteNames) {
  for (auto s : {SuiteName::Table2, SuiteName::Table4, SuiteName::Table5, SuiteName::Fig3})
    EXPECT_EQ(suite_from_string(to_string(s)), s);
  EXPECT_THROW(suite_from_string("table3"), ConfigError);
}

TEST(Summary, MeanAndSampleStd) {
  CellResult c;
  for (double p : {0.1, 0.2, 0.6}) c.runs.push_back({.per = p});
  c.runs.push_back({.ok = false, .per = 9.0});
  const auto s = summarize(c, &RunResult::per);
  EXPECT_EQ(s.n, 3);
  EXPECT_NEAR(s.mean, 0.3, 1e-15);
  EXPECT_NEAR(s.std, std::sqrt((0.04 + 0.01 + 0.09) / 2.0), 1e-15);
}

TEST(Digest, StableAndSensitive) {
  const json a = {{"x", 1}}, b = {{"x", 2}};
  EXPECT_EQ(json_digest(a), json_digest(a));
  EXPECT_NE(json_digest(a), json_digest(b));
  EXPECT_EQ(json_digest(a).size(), 16u);
}

class TinySuites : public ::testing::Test {
 protected:
  static SuiteResult run(SuiteName s, int workers) {
    Lab lab(tiny());
    return run_suite(s, lab, workers);
  }
};

TEST_F(TinySuites, Table2DeterministicAcrossRunsAndWorkers) {
  const auto a = run(SuiteName::Table2, 1);
  const auto b = run(SuiteName::Table2, 1);
  const auto c = run(SuiteName::Table2, 3);
  EXPECT_EQ(results_csv(a), results_csv(b));
  EXPECT_EQ(results_csv(a), results_csv(c));
  EXPECT_EQ(header_of(results_csv(a)), results_header());
  for (const auto& cell : a.cells)
    for (const auto& r : cell.runs) {
      EXPECT_TRUE(r.ok) << r.error;
      EXPECT_TRUE(r.freeze_ok);
    }
  // At ratio 100% every combo in the same pretraining family lands on the same parameters.
  for (const auto& g : a.checks.at("ratio100_identity")) EXPECT_TRUE(g.at("identical").get<bool>()) << g.dump();
}

TEST_F(TinySuites, CsvKeepsPerSeedAndAggregateRows) {
  const auto r = run(SuiteName::Table5, 1);
  const auto csv = results_csv(r);
  std::stringstream in(csv);
  std::string line;
  std::getline(in, line);
  int per_seed = 0, aggregate = 0;
  while (std::getline(in, line)) {
    if (line.find(",per,") == std::string::npos) continue;
    (line.find(",all,") != std::string::npos ? aggregate : per_seed)++;
  }
  EXPECT_EQ(per_seed, static_cast<int>(r.cells.size() * 2));
  EXPECT_EQ(aggregate, static_cast<int>(r.cells.size()));
  const auto checks = trend_checks(r);
  EXPECT_EQ(checks.size(), 3u);
}

TEST_F(TinySuites, SoftMixAlphaOneMatchesHardMix) {
  const auto r = run(SuiteName::Table4, 1);
  const auto* hard = find_cell(r, [](const Cell& c) { return c.strategy.kind == StrategyKind::HardPhonemeMix; });
  const auto* soft = find_cell(r, [](const Cell& c) { return c.strategy.kind == StrategyKind::SoftMix && c.strategy.alpha == 1.0; });
  ASSERT_TRUE(hard && soft);
  for (std::size_t i = 0; i < hard->runs.size(); ++i) {
    EXPECT_EQ(hard->runs[i].param_fingerprint, soft->runs[i].param_fingerprint);
    EXPECT_EQ(hard->runs[i].per, soft->runs[i].per);
  }
}

TEST_F(TinySuites, Fig3Curves) {
  const auto r = run(SuiteName::Fig3, 1);
  const auto curves = suite_curves(r);
  EXPECT_EQ(curves.size(), 3u);
  for (const auto& [name, body] : curves) {
    EXPECT_EQ(body.rfind("# minutes mean_per\n", 0), 0u) << name;
  }
  EXPECT_TRUE(curves.count("ProposedX_shots4"));
}
