#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plmix/corpus.hpp"
#include "plmix/errors.hpp"
#include "plmix/model.hpp"
#include "plmix/pipeline.hpp"
#include "plmix/pseudolabel.hpp"
#include "plmix/strategy.hpp"

namespace plmix {

inline constexpr int kConfigFormatVersion = 1;

/// One pretraining/fine-tuning setup in a table: mix pretraining on or off plus a strategy kind.
struct Combo {
  bool mix_pretrain = true;
  StrategyKind kind = StrategyKind::HardPhonemeMix;
};

struct GridConfig {
  /// Labeled utterances and unlabeled minutes for table2, table4 and the TTS side of table5.
  int table_shots = 4;
  double table_minutes = 15.0;
  std::vector<Combo> table2_combos = {
      {true, StrategyKind::HardPhonemeMix}, {true, StrategyKind::PhonemeFilter},
      {false, StrategyKind::PhonemeFilter}, {true, StrategyKind::SentenceMix},
      {true, StrategyKind::SentenceFilter}, {false, StrategyKind::SentenceFilter}};
  std::vector<double> table2_ratios = {0.25, 0.5, 0.75, 1.0};
  std::vector<StrategyKind> table4_kinds = {StrategyKind::HardPhonemeMix, StrategyKind::SoftMix,
                                            StrategyKind::Sampling};
  std::vector<double> table4_ratios = {0.25, 0.5, 0.75};
  std::vector<double> alphas = {0.9};
  std::vector<int> asr_shots = {4, 16, 64};
  double table5_ratio = 0.75;
  std::vector<int> fig3_shots = {4, 16, 64};
  std::vector<double> fig3_minutes = {0.0, 15.0, 60.0, 240.0};
  double proposed_ratio = 0.75;
};

struct ExperimentConfig {
  int format_version = kConfigFormatVersion;
  std::uint64_t world_seed = 7;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  LanguageConfig language;
  SslConfig ssl;
  /// n_shots and unlabeled_minutes are used by the stage subcommands; suites take them from the grid.
  SplitConfig split = default_split();
  ModelConfig model = default_model();
  std::uint64_t model_seed = 11;
  PretrainConfig pretrain;
  GeneratorConfig generator;
  ClassifierConfig classifier;
  FinetuneConfig finetune;
  GridConfig grid;
  int workers = 1;

  static ModelConfig default_model() {
    ModelConfig m;
    m.position_scale = 6.0;
    return m;
  }
  static SplitConfig default_split() {
    SplitConfig s;
    s.n_shots = 4;
    s.unlabeled_minutes = 15.0;
    s.eval_size = 128;
    return s;
  }
};

/// Field-level validation problems, each formatted as "path: message".
class ConfigIssues : public ConfigError {
 public:
  explicit ConfigIssues(std::vector<std::string> issues);
  const std::vector<std::string>& issues() const { return issues_; }

 private:
  std::vector<std::string> issues_;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Rejects unknown keys, wrong types and out-of-range values; throws ConfigIssues listing all of them.
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

enum class SuiteName { Table2, Table4, Table5, Fig3 };
std::string to_string(SuiteName s);
SuiteName suite_from_string(const std::string& s);

/// Everything that distinguishes one cell of a suite.
struct Cell {
  std::string method;  // Baseline / Proposed / Proposed* in fig3, else the combo label
  bool mix_pretrain = true;
  MixStrategy strategy;
  bool has_ratio = true;
  bool generator_init = false;
  int tts_shots = 4;
  int asr_shots = 4;
  double minutes = 15.0;

  std::string label() const;
};

struct RunResult {
  bool ok = true;
  std::string error;
  double per = 0.0;
  double pseudo_per = 0.0;
  double lambda = 0.0;
  double kept_ratio = 1.0;
  bool freeze_ok = true;
  std::uint64_t param_fingerprint = 0;
};

struct CellResult {
  Cell cell;
  std::vector<std::uint64_t> seeds;
  std::vector<RunResult> runs;  // aligned with seeds
};

struct SuiteResult {
  SuiteName suite;
  std::vector<CellResult> cells;
  nlohmann::json checks = nlohmann::json::object();
};

/// The cells of a suite, in output order.
std::vector<Cell> suite_cells(SuiteName s, const ExperimentConfig& cfg);

/// Shared per-world state: source data, SSL simulator and pretrained checkpoints. Safe to use
/// from several worker threads.
class Lab {
 public:
  explicit Lab(ExperimentConfig cfg, std::optional<std::filesystem::path> cache_dir = std::nullopt);

  const ExperimentConfig& config() const { return cfg_; }
  const SslSimulator& ssl() const { return ssl_; }

  /// Pretrained (and generator-trained) checkpoint for mix/no-mix pretraining. Cached in
  /// memory and, when a cache directory is set, on disk under a hash of the relevant config.
  const SynthModel& pretrained(bool mix_pretrain);
  std::string pretrain_key(bool mix_pretrain) const;

  /// Target-side data of one run: the TTS split plus pseudo labels from an ASR trained on
  /// `asr_shots` labeled utterances of the same run seed.
  struct Data {
    CorpusSplit tts;
    std::vector<PseudoUtterance> pseudo;
    double pseudo_per = 0.0;  // NaN without unlabeled speech
  };
  std::shared_ptr<const Data> build_data(std::uint64_t seed, int tts_shots, int asr_shots, double minutes) const;
  SplitConfig split_config(int shots, double minutes) const;

  /// Fine-tunes a copy of the matching pretrained checkpoint and evaluates it. Errors are
  /// captured in the result rather than thrown.
  RunResult run(const Data& data, const Cell& cell, std::uint64_t seed, SynthModel* tuned = nullptr);
  RunResult run(const Cell& cell, std::uint64_t seed, SynthModel* tuned = nullptr);

 private:
  ExperimentConfig cfg_;
  std::optional<std::filesystem::path> cache_dir_;
  SslSimulator ssl_;
  std::mutex mu_;
  std::map<bool, std::unique_ptr<SynthModel>> models_;
};

/// Runs every (cell, seed) job on a pool of `workers` threads; results are merged in cell order.
SuiteResult run_suite(SuiteName s, Lab& lab, int workers);

/// Fixed CSV header shared by every suite and subcommand.
const std::vector<std::string>& results_header();
/// Per-seed rows for every metric followed by one aggregate row per (cell, metric).
std::string results_csv(const SuiteResult& r);
nlohmann::json results_json(const SuiteResult& r);
/// Two-column "x value" plot data, keyed by file stem. Only fig3 produces curves.
std::map<std::string, std::string> suite_curves(const SuiteResult& r);

struct Summary {
  double mean = 0.0;
  double std = 0.0;
  int n = 0;
};
/// Mean and sample standard deviation over the successful, finite runs of a cell.
Summary summarize(const CellResult& c, double RunResult::*metric);

/// Stable hex digest of a JSON value (its compact dump).
std::string json_digest(const nlohmann::json& j);

/// Trend checks shared by `suite --assert` and the acceptance binary.
struct TrendCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};
std::vector<TrendCheck> trend_checks(const SuiteResult& r);

/// Finds a cell by predicate; nullptr if absent.
const CellResult* find_cell(const SuiteResult& r, const std::function<bool(const Cell&)>& pred);

}  // namespace plmix
