// Exit gate: one PASS/FAIL line per criterion, exit 1 if any fails.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "plmix/gradsuite.hpp"
#include "plmix/harness.hpp"
#include "plmix/metrics.hpp"
#include "plmix/pseudolabel.hpp"
#include "plmix/strategy.hpp"

using namespace plmix;

namespace {

constexpr double kGradRuntimeLimit = 60.0;     // seconds
constexpr int kCalibrationPools = 1000;
constexpr int kMonteCarloTrials = 10000;
constexpr double kSamplingTolerance = 0.02;
constexpr int kDecodeUtterances = 1000;
constexpr int kMinSeeds = 5;

struct Outcome {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Outcome> outcomes;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  outcomes.push_back({id, name, pass, detail});
  std::printf("%s [%d] %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

void check_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cases = run_grad_suite(1, 10);
  const double secs = seconds_since(t0);
  double worst_layer = 0.0, worst_composed = 0.0;
  bool ok = true;
  for (const auto& c : cases) {
    ok = ok && c.pass() && c.result.coordinates > 0;
    double& w = c.tolerance == kComposedTolerance ? worst_composed : worst_layer;
    w = std::max(w, c.result.max_rel_error);
  }
  report(1, "gradient soundness", ok && secs < kGradRuntimeLimit,
         "worst layer " + num(worst_layer) + " (< 1e-4), worst composed " + num(worst_composed) +
             " over 10 seeds (< 1e-3), " + num(secs) + " s");
}

void check_identity(Lab& lab) {
  const auto& cfg = lab.config();
  bool same = true;
  std::string detail;
  for (std::uint64_t seed : cfg.seeds) {
    std::vector<SynthModel> models;
    std::vector<double> pers;
    for (auto kind : {StrategyKind::HardPhonemeMix, StrategyKind::SentenceMix, StrategyKind::PhonemeFilter,
                      StrategyKind::SentenceFilter}) {
      Cell c;
      c.method = "identity";
      c.strategy.kind = kind;
      c.strategy.ratio = 1.0;
      c.tts_shots = c.asr_shots = cfg.grid.table_shots;
      c.minutes = cfg.grid.table_minutes;
      SynthModel m(cfg.model, 0);
      const auto r = lab.run(c, seed, &m);
      same = same && r.ok && r.lambda == 0.0;
      models.push_back(std::move(m));
      pers.push_back(r.per);
    }
    for (std::size_t i = 1; i < models.size(); ++i) {
      same = same && pers[i] == pers[0];
      const auto& a = models[0].params().all();
      const auto& b = models[i].params().all();
      same = same && a.size() == b.size();
      for (std::size_t p = 0; same && p < a.size(); ++p) same = a[p].name == b[p].name && a[p].value.bit_equal(b[p].value);
    }
    detail += "seed " + std::to_string(seed) + " PER " + num(pers[0]) + "; ";
  }
  report(2, "ratio-100% strategy identity", same, "PM/SM/PF/SF bitwise equal, " + detail);
}

// Largest pool value whose kept fraction still reaches r, by exhaustive search.
double brute_threshold(const std::vector<double>& pool, double r) {
  double best = -1.0;
  for (double cand : pool) {
    std::size_t kept = 0;
    for (double x : pool) kept += x >= cand;
    if (static_cast<double>(kept) / static_cast<double>(pool.size()) >= r) best = std::max(best, cand);
  }
  return best;
}

void check_calibration() {
  Rng rng(20240601);
  int bad = 0;
  for (int t = 0; t < kCalibrationPools; ++t) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 200));
    std::set<double> seen;
    std::vector<double> pool;
    while (pool.size() < n) {
      const double v = rng.uniform();
      if (seen.insert(v).second) pool.push_back(v);
    }
    const double r = rng.uniform(0.01, 1.0);
    const double lambda = calibrate_threshold(pool, r);
    std::size_t kept = 0;
    for (double x : pool) kept += x >= lambda;
    const bool ok = static_cast<double>(kept) / static_cast<double>(n) >= r && lambda == brute_threshold(pool, r);
    bad += !ok;
  }
  report(3, "calibration exactness", bad == 0,
         std::to_string(kCalibrationPools - bad) + "/" + std::to_string(kCalibrationPools) + " pools exact");
}

void check_reductions() {
  Rng gen(77), rng(78);
  int mismatches = 0;
  for (int t = 0; t < kMonteCarloTrials; ++t) {
    std::vector<double> s(static_cast<std::size_t>(gen.uniform_int(1, 24)));
    for (double& x : s) x = gen.uniform();
    const double lambda = gen.uniform();
    mismatches += plan_soft_mix(s, lambda, 1.0, rng).choice != plan_hard_phoneme_mix(s, lambda).choice;
  }
  // Sampling: one 10k-trial run per confidence level, plus a mixed pool.
  double worst = 0.0;
  for (double level : {0.1, 0.25, 0.5, 0.9}) {
    std::size_t phn = 0;
    for (int t = 0; t < kMonteCarloTrials; ++t)
      phn += plan_sampling(std::vector<double>{level}, rng).choice[0] == Source::FromPhn;
    worst = std::max(worst, std::abs(static_cast<double>(phn) / kMonteCarloTrials - level));
  }
  std::vector<double> mixed(kMonteCarloTrials);
  double mean = 0.0;
  for (double& x : mixed) mean += (x = gen.uniform());
  mean /= kMonteCarloTrials;
  const auto plan = plan_sampling(mixed, rng);
  const double frac = static_cast<double>(std::count(plan.choice.begin(), plan.choice.end(), Source::FromPhn)) /
                      kMonteCarloTrials;
  worst = std::max(worst, std::abs(frac - mean));
  report(4, "mixing-function reductions", mismatches == 0 && worst <= kSamplingTolerance,
         "SoftMix(1) vs HardMix mismatches " + std::to_string(mismatches) + "/" + std::to_string(kMonteCarloTrials) +
             ", Sampling max |freq - conf| " + num(worst) + " (<= 0.02)");
}

void report_trends(int id, const std::string& name, const SuiteResult& r, const std::vector<std::string>& wanted,
                   double secs, double limit) {
  bool ok = r.cells.front().seeds.size() >= kMinSeeds;
  std::string detail;
  for (const auto& t : trend_checks(r)) {
    if (std::find(wanted.begin(), wanted.end(), t.name) == wanted.end()) continue;
    ok = ok && t.pass;
    detail += std::string(t.pass ? "ok" : "NOT MET") + " {" + t.name + ": " + t.detail + "} ";
  }
  for (const auto& c : r.cells)
    for (const auto& run : c.runs)
      if (!run.ok) {
        ok = false;
        detail += "run error in " + c.cell.label() + ": " + run.error + " ";
      }
  if (limit > 0) {
    ok = ok && secs < limit;
    detail += "(" + num(secs) + " s, limit " + num(limit) + " s)";
  } else {
    detail += "(" + num(secs) + " s)";
  }
  report(id, name, ok, detail);
}

void check_merge_decode(const ExperimentConfig& cfg) {
  Rng rng(99);
  int merge_bad = 0;
  for (int t = 0; t < kDecodeUtterances; ++t) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 120));
    std::vector<int> ids(n);
    std::vector<double> conf(n);
    for (std::size_t i = 0; i < n; ++i) {
      ids[i] = static_cast<int>(rng.uniform_int(0, 5));
      conf[i] = rng.uniform();
    }
    merge_bad += expand_runs(merge_consecutive(ids, conf)) != ids;
  }
  SplitConfig sc = cfg.split;
  sc.eval_size = kDecodeUtterances;
  sc.unlabeled_minutes = 0.0;
  sc.source_utterances = 1;
  const auto split = make_split(cfg.world_seed, cfg.seeds.front(), sc, cfg.language);
  PerTally tally;
  for (const auto& u : split.eval) tally.add(decode_oracle(u.frames, split.target_language), u.phonemes);
  report(8, "merge/decode invariants", merge_bad == 0 && tally.rate() == 0.0 && split.eval.size() == kDecodeUtterances,
         "merge round-trip failures " + std::to_string(merge_bad) + "/" + std::to_string(kDecodeUtterances) +
             ", oracle PER " + num(tally.rate()) + " on " + std::to_string(split.eval.size()) + " eval utterances");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance"};
  std::string config_path;
  int jobs = 1;
  app.add_option("-c,--config", config_path, "experiment config (defaults when omitted)");
  app.add_option("-j,--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_experiment_config(config_path);
    std::printf("acceptance: world %llu, %zu seeds, %d worker(s)\n", static_cast<unsigned long long>(cfg.world_seed),
                cfg.seeds.size(), jobs);

    check_gradients();
    Lab lab(cfg);

    std::vector<SuiteResult> suites;
    auto timed = [&](SuiteName s, double* secs) {
      const auto t0 = std::chrono::steady_clock::now();
      suites.push_back(run_suite(s, lab, jobs));
      *secs = seconds_since(t0);
      return suites.back();
    };
    double t2 = 0, t4 = 0, t5 = 0, f3 = 0;
    const auto table2 = timed(SuiteName::Table2, &t2);
    check_identity(lab);
    check_calibration();
    check_reductions();
    report_trends(5, "table2 trend", table2,
                  {"MP+PM@75% < noMP+SF@100%", "MP+PM < MP+SF @50%", "MP+PM < MP+SF @75%"}, t2, 600.0);
    const auto fig3 = timed(SuiteName::Fig3, &f3);
    report_trends(6, "fig3 trend", fig3,
                  {"Proposed* 4-shot/15-min < 0.5 x 4-shot/0-min", "Proposed <= Baseline in every cell with minutes > 0"},
                  f3, 0);
    const auto table5 = timed(SuiteName::Table5, &t5);
    report_trends(7, "table5 trend", table5,
                  {"MP+PM <= noMP+SF at every ASR shot count", "pseudo-label PER non-increasing in ASR shots"}, t5, 0);
    check_merge_decode(cfg);
    timed(SuiteName::Table4, &t4);

    std::size_t runs = 0, frozen = 0;
    for (const auto& s : suites)
      for (const auto& c : s.cells)
        for (const auto& r : c.runs) {
          ++runs;
          frozen += r.ok && r.freeze_ok;
        }
    report(9, "freeze contract", runs > 0 && frozen == runs,
           std::to_string(frozen) + "/" + std::to_string(runs) + " benchmark runs kept the representation encoder and SSL transforms bitwise");

    // A fresh lab recomputes the pretrained checkpoints too.
    const auto t0 = std::chrono::steady_clock::now();
    Lab again(cfg);
    const auto rerun = run_suite(SuiteName::Table5, again, jobs);
    const std::string first = results_csv(suites[2]);
    report(10, "determinism", first == results_csv(rerun),
           "table5 results.csv rerun byte-identical (" + std::to_string(first.size()) + " bytes, " +
               num(seconds_since(t0)) + " s)");
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance aborted: %s\n", e.what());
    return 2;
  }

  const auto failed = std::count_if(outcomes.begin(), outcomes.end(), [](const Outcome& o) { return !o.pass; });
  std::printf("acceptance: %zu/%zu criteria passed\n", outcomes.size() - static_cast<std::size_t>(failed),
              outcomes.size());
  return failed == 0 ? 0 : 1;
}
