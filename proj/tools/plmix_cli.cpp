// Command-line front end: one subcommand per pipeline stage plus the benchmark suites.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "plmix/errors.hpp"
#include "plmix/gradsuite.hpp"
#include "plmix/harness.hpp"
#include "plmix/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace plmix;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitAssert = 3;
constexpr const char* kVersion = "0.1.0";

struct Globals {
  std::string config;
  std::string out = "runs";
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string file_digest(const fs::path& p) {
  if (!fs::exists(p)) throw InputError("missing input '" + p.string() + "'");
  json j = json::object();
  auto add = [&](const fs::path& f) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw InputError("cannot open '" + f.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    j[fs::relative(f, fs::is_directory(p) ? p : p.parent_path()).string()] = json_digest(json(ss.str()));
  };
  if (fs::is_directory(p)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) add(f);
  } else {
    add(p);
  }
  return json_digest(j);
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot open '" + p.string() + "' for writing");
  out << text;
}

std::string csv_line(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s + "\n";
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// Rows for single-stage subcommands: only suite, seed, metric, value and status are filled.
struct StageRows {
  std::string stage;
  std::uint64_t seed = 0;
  std::string text = csv_line(results_header());
  void add(const std::string& metric, double value) {
    std::vector<std::string> v(results_header().size());
    v[0] = stage;
    v[11] = std::to_string(seed);
    v[12] = "0";
    v[13] = "1";
    v[14] = metric;
    v[15] = num(value);
    v[17] = "ok";
    text += csv_line(v);
  }
};

/// A content-addressed run directory: its name is a digest of the subcommand, the resolved
/// config, the arguments and the digests of every input.
class Run {
 public:
  Run(const Globals& g, std::string subcommand, const ExperimentConfig& cfg, json args, json inputs)
      : subcommand_(std::move(subcommand)), started_(utc_now()) {
    manifest_ = {{"tool", "plmix"},     {"version", kVersion}, {"subcommand", subcommand_},
                 {"config", to_json(cfg)}, {"args", std::move(args)}, {"inputs", std::move(inputs)}};
    const std::string id = json_digest(manifest_);
    dir_ = fs::path(g.out) / (subcommand_ + "-" + id);
    manifest_["run_id"] = id;
    fs::create_directories(dir_ / "curves");
  }
  const fs::path& dir() const { return dir_; }
  json& manifest() { return manifest_; }
  void output(const std::string& name) { outputs_.push_back(name); }
  void finish(int code) {
    manifest_["outputs"] = outputs_;
    manifest_["started_at"] = started_;
    manifest_["finished_at"] = utc_now();
    manifest_["exit_code"] = code;
    write_text(dir_ / "manifest.json", manifest_.dump(2) + "\n");
    std::cout << dir_.string() << "\n";
  }

 private:
  std::string subcommand_;
  std::string started_;
  json manifest_;
  fs::path dir_;
  std::vector<std::string> outputs_;
};

ExperimentConfig resolve_config(const Globals& g) {
  ExperimentConfig cfg;
  if (!g.config.empty()) cfg = load_experiment_config(g.config);
  if (g.seed) cfg.seeds = {*g.seed};
  if (g.jobs) {
    if (*g.jobs < 1) throw ConfigIssues({"--jobs: must be positive"});
    cfg.workers = *g.jobs;
  }
  return cfg;
}

std::vector<ToyLanguage> source_languages(const ExperimentConfig& cfg) {
  std::vector<ToyLanguage> langs;
  for (int l = 0; l < cfg.split.n_source_langs; ++l) langs.push_back(gen_language(cfg.world_seed, l, cfg.language));
  return langs;
}

void require_path(const std::string& p, const char* what) {
  if (p.empty()) throw ConfigIssues({std::string(what) + ": required"});
  if (!fs::exists(p)) throw InputError("missing " + std::string(what) + " '" + p + "'");
}

std::string curve_text(const std::vector<double>& curve) {
  std::string s = "# window mean_loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) s += std::to_string(i) + " " + num(curve[i]) + "\n";
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"plmix: pseudo-label mixing lab on synthetic languages"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("-c,--config", g.config, "experiment config (JSON)");
  app.add_option("-o,--out", g.out, "output root; each run gets a content-addressed directory");
  app.add_option("--seed", g.seed, "run seed override");
  app.add_option("-j,--jobs", g.jobs, "worker threads for suites");

  std::string checkpoint, corpus, pseudo_path, suite_name, grad_case;
  bool no_mix = false, assert_trends = false;

  auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus split for one seed");
  auto* pre = app.add_subcommand("pretrain", "mix pretraining on the source languages");
  pre->add_flag("--no-mix", no_mix, "phoneme-branch only (p_repr = 0)");
  auto* gtr = app.add_subcommand("train-generator", "train the embedding generator of a checkpoint");
  gtr->add_option("--checkpoint", checkpoint)->required();
  auto* pl = app.add_subcommand("pseudo-label", "train the frame classifier and label the unpaired speech");
  pl->add_option("--corpus", corpus)->required();
  auto* ft = app.add_subcommand("finetune", "fine-tune a checkpoint on the target language");
  ft->add_option("--checkpoint", checkpoint)->required();
  ft->add_option("--corpus", corpus)->required();
  ft->add_option("--pseudo", pseudo_path, "pseudo corpus from pseudo-label");
  auto* ev = app.add_subcommand("eval", "PER of a checkpoint on the corpus eval set");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--corpus", corpus)->required();
  auto* su = app.add_subcommand("suite", "run a benchmark suite");
  su->add_option("name", suite_name, "table2 | table4 | table5 | fig3")->required();
  su->add_flag("--assert", assert_trends, "exit 3 when a trend check fails");
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every layer and the composed model");
  gc->add_option("--case", grad_case, "run a single case");
  for (auto* s : {gen, pre, gtr, pl, ft, ev, su, gc}) s->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const ExperimentConfig cfg = resolve_config(g);
    const std::uint64_t seed = cfg.seeds.front();
    SslSimulator ssl(cfg.world_seed, cfg.language.frame_dim, cfg.ssl);

    if (*gen) {
      Run run(g, "gen-corpus", cfg, {{"seed", seed}}, json::object());
      const auto split = make_split(cfg.world_seed, seed, cfg.split, cfg.language);
      save_split(split, run.dir() / "corpus");
      run.output("corpus");
      StageRows rows{"gen-corpus", seed};
      rows.add("target_utterances", static_cast<double>(split.target.size()));
      rows.add("unpaired_utterances", static_cast<double>(split.unpaired.size()));
      rows.add("eval_utterances", static_cast<double>(split.eval.size()));
      write_text(run.dir() / "results.csv", rows.text);
      run.output("results.csv");
      run.finish(kExitOk);
      return kExitOk;
    }

    if (*pre) {
      Run run(g, "pretrain", cfg, {{"no_mix", no_mix}}, json::object());
      const auto langs = source_languages(cfg);
      const auto source = make_source(cfg.world_seed, cfg.split, langs);
      SynthModel m(cfg.model, cfg.model_seed);
      PretrainConfig pc = cfg.pretrain;
      if (no_mix) pc.p_repr = 0.0;
      const auto stats = mix_pretrain(m, source, langs, ssl, pc);
      for (const auto& w : stats.warnings) std::cerr << "warning: " << w << "\n";
      m.save(run.dir() / "model.ckpt");
      write_text(run.dir() / "curves" / "pretrain_loss.dat", curve_text(stats.loss_curve));
      StageRows rows{"pretrain", pc.seed};
      rows.add("final_loss", stats.final_loss);
      rows.add("phoneme_samples", stats.phoneme_samples);
      rows.add("representation_samples", stats.representation_samples);
      write_text(run.dir() / "results.csv", rows.text);
      for (auto o : {"model.ckpt", "curves/pretrain_loss.dat", "results.csv"}) run.output(o);
      run.finish(kExitOk);
      return kExitOk;
    }

    if (*gtr) {
      require_path(checkpoint, "--checkpoint");
      Run run(g, "train-generator", cfg, json::object(), {{"checkpoint", file_digest(checkpoint)}});
      SynthModel m = SynthModel::load(checkpoint);
      const auto langs = source_languages(cfg);
      const auto source = make_source(cfg.world_seed, cfg.split, langs);
      const auto stats = train_embedding_generator(m, source, langs, ssl, cfg.generator);
      m.save(run.dir() / "model.ckpt");
      write_text(run.dir() / "curves" / "generator_loss.dat", curve_text(stats.loss_curve));
      StageRows rows{"train-generator", cfg.generator.seed};
      rows.add("final_loss", stats.final_loss);
      write_text(run.dir() / "results.csv", rows.text);
      for (auto o : {"model.ckpt", "curves/generator_loss.dat", "results.csv"}) run.output(o);
      run.finish(kExitOk);
      return kExitOk;
    }

    if (*pl) {
      require_path(corpus, "--corpus");
      Run run(g, "pseudo-label", cfg, json::object(), {{"corpus", file_digest(corpus)}});
      const auto split = load_split(corpus);
      std::vector<LayeredFeatures> feats;
      for (const auto& u : split.target) feats.push_back(ssl.features(u));
      const auto clf = train_frame_classifier(split.target_language, split.target, feats, cfg.classifier, split.run_seed);
      const auto labels = pseudo_label(clf, split.unpaired, ssl);
      save_classifier(clf, run.dir() / "classifier.bin");
      save_pseudo_corpus(labels, run.dir() / "pseudo.bin");
      StageRows rows{"pseudo-label", split.run_seed};
      if (!labels.empty()) rows.add("pseudo_per", pseudo_label_per(labels, split.withheld));
      rows.add("pseudo_utterances", static_cast<double>(labels.size()));
      write_text(run.dir() / "results.csv", rows.text);
      for (auto o : {"classifier.bin", "pseudo.bin", "results.csv"}) run.output(o);
      run.finish(kExitOk);
      return kExitOk;
    }

    if (*ft) {
      require_path(checkpoint, "--checkpoint");
      require_path(corpus, "--corpus");
      json inputs = {{"checkpoint", file_digest(checkpoint)}, {"corpus", file_digest(corpus)}};
      if (!pseudo_path.empty()) {
        require_path(pseudo_path, "--pseudo");
        inputs["pseudo"] = file_digest(pseudo_path);
      }
      Run run(g, "finetune", cfg, json::object(), inputs);
      SynthModel m = SynthModel::load(checkpoint);
      const auto split = load_split(corpus);
      std::vector<PseudoUtterance> labels;
      std::vector<UnpairedUtterance> speech;
      if (!pseudo_path.empty()) {
        labels = load_pseudo_corpus(pseudo_path);
        speech = split.unpaired;
      }
      FinetuneConfig fc = cfg.finetune;
      fc.seed = derive_seed(cfg.finetune.seed, {split.run_seed});
      const auto stats = finetune(m, {&split.target_language, split.target, labels, speech, &ssl}, fc);
      m.save(run.dir() / "model.ckpt");
      write_text(run.dir() / "curves" / "finetune_loss.dat", curve_text(stats.loss_curve));
      StageRows rows{"finetune", split.run_seed};
      rows.add("lambda", stats.threshold);
      rows.add("kept_ratio", stats.kept_ratio);
      rows.add("freeze_ok", stats.freeze_ok ? 1.0 : 0.0);
      rows.add("final_loss", stats.final_loss);
      rows.add("per", evaluate_per(m, split.target_language, split.eval));
      write_text(run.dir() / "results.csv", rows.text);
      for (auto o : {"model.ckpt", "curves/finetune_loss.dat", "results.csv"}) run.output(o);
      run.finish(kExitOk);
      return kExitOk;
    }

    if (*ev) {
      require_path(checkpoint, "--checkpoint");
      require_path(corpus, "--corpus");
      Run run(g, "eval", cfg, json::object(), {{"checkpoint", file_digest(checkpoint)}, {"corpus", file_digest(corpus)}});
      const SynthModel m = SynthModel::load(checkpoint);
      const auto split = load_split(corpus);
      StageRows rows{"eval", split.run_seed};
      rows.add("per", evaluate_per(m, split.target_language, split.eval));
      write_text(run.dir() / "results.csv", rows.text);
      run.output("results.csv");
      run.finish(kExitOk);
      return kExitOk;
    }

    if (*su) {
      const SuiteName name = suite_from_string(suite_name);
      Run run(g, "suite-" + suite_name, cfg, {{"assert", assert_trends}}, json::object());
      Lab lab(cfg, fs::path(g.out) / "cache");
      const auto result = run_suite(name, lab, cfg.workers);
      write_text(run.dir() / "results.csv", results_csv(result));
      const json j = results_json(result);
      write_text(run.dir() / "results.json", j.dump(2) + "\n");
      run.output("results.csv");
      run.output("results.json");
      for (const auto& [stem, text] : suite_curves(result)) {
        write_text(run.dir() / "curves" / (stem + ".dat"), text);
        run.output("curves/" + stem + ".dat");
      }
      bool pass = true;
      for (const auto& t : trend_checks(result)) {
        std::cerr << (t.pass ? "PASS " : "FAIL ") << t.name << "  " << t.detail << "\n";
        pass = pass && t.pass;
      }
      bool errors = false;
      for (const auto& c : result.cells)
        for (const auto& r : c.runs)
          if (!r.ok) {
            errors = true;
            std::cerr << "error in " << c.cell.label() << ": " << r.error << "\n";
          }
      run.manifest()["trends_pass"] = pass;
      run.manifest()["cell_errors"] = errors;
      const int code = assert_trends && !pass ? kExitAssert : kExitOk;
      run.finish(code);
      return code;
    }

    if (*gc) {
      Run run(g, "grad-check", cfg, {{"case", grad_case}}, json::object());
      std::vector<GradCase> cases;
      if (grad_case.empty()) cases = run_grad_suite();
      else cases.push_back(run_grad_case(grad_case, 1));
      std::string text = csv_line(results_header());
      bool pass = true;
      for (const auto& c : cases) {
        std::vector<std::string> v(results_header().size());
        v[0] = "grad-check";
        v[1] = c.name;
        v[12] = "0";
        v[13] = "1";
        v[14] = "max_rel_error";
        v[15] = num(c.result.max_rel_error);
        v[17] = c.pass() ? "ok" : "fail";
        text += csv_line(v);
        std::cerr << (c.pass() ? "PASS " : "FAIL ") << c.name << " max_rel_error=" << num(c.result.max_rel_error)
                  << " tol=" << num(c.tolerance) << " worst=" << c.result.worst_param << "\n";
        pass = pass && c.pass();
      }
      write_text(run.dir() / "results.csv", text);
      run.output("results.csv");
      const int code = pass ? kExitOk : kExitAssert;
      run.finish(code);
      return code;
    }
  } catch (const ConfigIssues& e) {
    std::cerr << "config error:\n";
    for (const auto& i : e.issues()) std::cerr << "  " << i << "\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
