#include "plmix/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

#include "plmix/errors.hpp"
#include "plmix/metrics.hpp"

namespace plmix {

namespace {

using nlohmann::json;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string percent(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g%%", r * 100.0);
  return buf;
}

std::string json_type(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

// Structural check of a user document against the serialized defaults: unknown keys and
// type mismatches are reported with their JSON path.
void check_shape(const json& given, const json& defaults, const std::string& path, std::vector<std::string>& out) {
  const std::string where = path.empty() ? "<root>" : path;
  if (defaults.is_object()) {
    if (!given.is_object()) {
      out.push_back(where + ": expected object, got " + json_type(given));
      return;
    }
    for (const auto& [k, v] : given.items()) {
      const std::string sub = path.empty() ? k : path + "." + k;
      if (!defaults.contains(k)) {
        out.push_back(sub + ": unknown field");
        continue;
      }
      check_shape(v, defaults.at(k), sub, out);
    }
  } else if (defaults.is_array()) {
    if (!given.is_array()) {
      out.push_back(where + ": expected array, got " + json_type(given));
      return;
    }
    if (defaults.empty()) return;
    for (std::size_t i = 0; i < given.size(); ++i)
      check_shape(given[i], defaults.front(), path + "[" + std::to_string(i) + "]", out);
  } else if (defaults.is_boolean()) {
    if (!given.is_boolean()) out.push_back(where + ": expected boolean, got " + json_type(given));
  } else if (defaults.is_number_unsigned()) {
    if (!given.is_number_integer()) out.push_back(where + ": expected non-negative integer, got " + json_type(given));
    else if (given.is_number_integer() && !given.is_number_unsigned() && given.get<std::int64_t>() < 0)
      out.push_back(where + ": expected non-negative integer, got " + given.dump());
  } else if (defaults.is_number_integer()) {
    if (!given.is_number_integer()) out.push_back(where + ": expected integer, got " + json_type(given));
  } else if (defaults.is_number()) {
    if (!given.is_number()) out.push_back(where + ": expected number, got " + json_type(given));
  } else if (defaults.is_string()) {
    if (!given.is_string()) out.push_back(where + ": expected string, got " + json_type(given));
  }
}

json combo_json(const Combo& c) { return {{"mix_pretrain", c.mix_pretrain}, {"strategy", to_string(c.kind)}}; }

std::string combo_label(bool mp, StrategyKind k) { return std::string(mp ? "MP" : "noMP") + "+" + short_label(k); }

json grid_json(const GridConfig& g) {
  json combos = json::array();
  for (const auto& c : g.table2_combos) combos.push_back(combo_json(c));
  json kinds = json::array();
  for (auto k : g.table4_kinds) kinds.push_back(to_string(k));
  return {{"table_shots", g.table_shots},
          {"table_minutes", g.table_minutes},
          {"table2_combos", combos},
          {"table2_ratios", g.table2_ratios},
          {"table4_kinds", kinds},
          {"table4_ratios", g.table4_ratios},
          {"alphas", g.alphas},
          {"asr_shots", g.asr_shots},
          {"table5_ratio", g.table5_ratio},
          {"fig3_shots", g.fig3_shots},
          {"fig3_minutes", g.fig3_minutes},
          {"proposed_ratio", g.proposed_ratio}};
}

class Validator {
 public:
  explicit Validator(std::vector<std::string>& out) : out_(out) {}
  void require(bool ok, const std::string& path, const std::string& msg) {
    if (!ok) out_.push_back(path + ": " + msg);
  }
  void positive(double v, const std::string& path) { require(v > 0, path, "must be positive, got " + fmt(v)); }
  void non_negative(double v, const std::string& path) { require(v >= 0, path, "must be >= 0, got " + fmt(v)); }
  void ratio(double v, const std::string& path) { require(v > 0 && v <= 1, path, "must lie in (0, 1], got " + fmt(v)); }
  void unit(double v, const std::string& path) { require(v >= 0 && v <= 1, path, "must lie in [0, 1], got " + fmt(v)); }
  template <class T>
  void non_empty(const std::vector<T>& v, const std::string& path) {
    require(!v.empty(), path, "must not be empty");
  }

 private:
  std::vector<std::string>& out_;
};

void validate_adam(Validator& v, const AdamConfig& a, const std::string& p) {
  v.positive(a.lr, p + ".lr");
  v.require(a.beta1 >= 0 && a.beta1 < 1, p + ".beta1", "must lie in [0, 1)");
  v.require(a.beta2 >= 0 && a.beta2 < 1, p + ".beta2", "must lie in [0, 1)");
  v.positive(a.eps, p + ".eps");
  v.non_negative(a.warmup_steps, p + ".warmup_steps");
}

void validate(const ExperimentConfig& c, std::vector<std::string>& out) {
  Validator v(out);
  v.require(c.format_version == kConfigFormatVersion, "format_version",
            "unsupported version " + std::to_string(c.format_version) + " (expected " +
                std::to_string(kConfigFormatVersion) + ")");
  v.non_empty(c.seeds, "seeds");
  {
    std::set<std::uint64_t> uniq(c.seeds.begin(), c.seeds.end());
    v.require(uniq.size() == c.seeds.size(), "seeds", "must be distinct");
  }
  const auto& l = c.language;
  v.require(l.phonemes >= 2, "language.phonemes", "must be >= 2");
  v.require(l.phonemes < kPhonemeIdStride, "language.phonemes", "must be < " + std::to_string(kPhonemeIdStride));
  v.positive(l.frame_dim, "language.frame_dim");
  v.non_negative(l.noise, "language.noise");
  v.require(l.min_duration >= 1, "language.min_duration", "must be >= 1");
  v.require(l.max_duration >= l.min_duration, "language.max_duration", "must be >= language.min_duration");
  v.non_negative(l.zipf, "language.zipf");

  const auto& s = c.ssl;
  v.require(s.layers >= 2, "ssl.layers", "must be >= 2");
  v.positive(s.dim, "ssl.dim");
  v.non_negative(s.noise, "ssl.noise");
  v.non_empty(s.layer_noise, "ssl.layer_noise");
  v.require(s.temporal_correlation >= 0 && s.temporal_correlation < 1, "ssl.temporal_correlation",
            "must lie in [0, 1)");
  v.non_negative(s.nuisance_dim, "ssl.nuisance_dim");
  v.non_negative(s.nuisance_scale, "ssl.nuisance_scale");

  const auto& sp = c.split;
  v.require(sp.n_source_langs >= 1, "split.n_source_langs", "must be >= 1");
  v.positive(sp.source_utterances, "split.source_utterances");
  v.positive(sp.n_shots, "split.n_shots");
  v.non_negative(sp.unlabeled_minutes, "split.unlabeled_minutes");
  v.positive(sp.eval_size, "split.eval_size");
  v.require(sp.min_length >= 1, "split.min_length", "must be >= 1");
  v.require(sp.max_length >= sp.min_length, "split.max_length", "must be >= split.min_length");
  v.positive(sp.frames_per_second, "split.frames_per_second");

  const auto& m = c.model;
  v.positive(m.hidden, "model.hidden");
  v.require(m.frame_dim == l.frame_dim, "model.frame_dim", "must equal language.frame_dim");
  v.require(m.ssl_dim == s.dim, "model.ssl_dim", "must equal ssl.dim");
  v.require(m.ssl_layers == s.layers, "model.ssl_layers", "must equal ssl.layers");
  v.positive(m.position_scale, "model.position_scale");

  v.require(c.pretrain.p_repr > 0 && c.pretrain.p_repr < 1, "pretrain.p_repr",
            "must lie in (0, 1); the no-mix runs use 0 automatically");
  v.positive(c.pretrain.steps, "pretrain.steps");
  v.positive(c.pretrain.batch, "pretrain.batch");
  validate_adam(v, c.pretrain.adam, "pretrain.adam");
  v.non_negative(c.generator.steps, "generator.steps");
  v.positive(c.generator.batch, "generator.batch");
  v.require(c.generator.support >= 1 && c.generator.support < c.generator.batch, "generator.support",
            "must lie in [1, generator.batch)");
  validate_adam(v, c.generator.adam, "generator.adam");
  v.positive(c.classifier.steps, "classifier.steps");
  v.positive(c.classifier.lr, "classifier.lr");
  v.positive(c.finetune.steps, "finetune.steps");
  v.positive(c.finetune.batch, "finetune.batch");
  validate_adam(v, c.finetune.adam, "finetune.adam");
  v.ratio(c.finetune.strategy.ratio, "finetune.strategy.ratio");
  v.unit(c.finetune.strategy.alpha, "finetune.strategy.alpha");

  const auto& g = c.grid;
  v.positive(g.table_shots, "grid.table_shots");
  v.non_negative(g.table_minutes, "grid.table_minutes");
  v.non_empty(g.table2_combos, "grid.table2_combos");
  for (std::size_t i = 0; i < g.table2_combos.size(); ++i) {
    const auto& co = g.table2_combos[i];
    v.require(co.mix_pretrain || !is_mixing(co.kind), "grid.table2_combos[" + std::to_string(i) + "]",
              to_string(co.kind) + " mixes in representation encodings and needs mix_pretrain");
  }
  auto ratios = [&](const std::vector<double>& r, const std::string& p) {
    v.non_empty(r, p);
    for (std::size_t i = 0; i < r.size(); ++i) v.ratio(r[i], p + "[" + std::to_string(i) + "]");
  };
  ratios(g.table2_ratios, "grid.table2_ratios");
  ratios(g.table4_ratios, "grid.table4_ratios");
  v.non_empty(g.table4_kinds, "grid.table4_kinds");
  for (std::size_t i = 0; i < g.table4_kinds.size(); ++i)
    v.require(is_mixing(g.table4_kinds[i]) && g.table4_kinds[i] != StrategyKind::SentenceMix,
              "grid.table4_kinds[" + std::to_string(i) + "]", "must be phoneme_mix, soft_mix or sampling");
  v.non_empty(g.alphas, "grid.alphas");
  for (std::size_t i = 0; i < g.alphas.size(); ++i) v.unit(g.alphas[i], "grid.alphas[" + std::to_string(i) + "]");
  v.non_empty(g.asr_shots, "grid.asr_shots");
  for (std::size_t i = 0; i < g.asr_shots.size(); ++i)
    v.positive(g.asr_shots[i], "grid.asr_shots[" + std::to_string(i) + "]");
  v.ratio(g.table5_ratio, "grid.table5_ratio");
  v.non_empty(g.fig3_shots, "grid.fig3_shots");
  for (std::size_t i = 0; i < g.fig3_shots.size(); ++i)
    v.positive(g.fig3_shots[i], "grid.fig3_shots[" + std::to_string(i) + "]");
  v.non_empty(g.fig3_minutes, "grid.fig3_minutes");
  for (std::size_t i = 0; i < g.fig3_minutes.size(); ++i)
    v.non_negative(g.fig3_minutes[i], "grid.fig3_minutes[" + std::to_string(i) + "]");
  v.ratio(g.proposed_ratio, "grid.proposed_ratio");
  v.positive(c.workers, "workers");
}

StrategyKind kind_at(const json& j, const std::string& path, std::vector<std::string>& out) {
  try {
    return strategy_kind_from_string(j.get<std::string>());
  } catch (const ConfigError& e) {
    out.push_back(path + ": " + e.what());
  }
  return StrategyKind::HardPhonemeMix;
}

}  // namespace

ConfigIssues::ConfigIssues(std::vector<std::string> issues)
    : ConfigError([&] {
        std::string msg = "invalid config";
        for (const auto& i : issues) msg += "\n  " + i;
        return msg;
      }()),
      issues_(std::move(issues)) {}

json to_json(const ExperimentConfig& c) {
  return {{"format_version", c.format_version},
          {"world_seed", c.world_seed},
          {"seeds", c.seeds},
          {"language", to_json(c.language)},
          {"ssl", to_json(c.ssl)},
          {"split", to_json(c.split)},
          {"model", to_json(c.model)},
          {"model_seed", c.model_seed},
          {"pretrain", to_json(c.pretrain)},
          {"generator", to_json(c.generator)},
          {"classifier", to_json(c.classifier)},
          {"finetune", to_json(c.finetune)},
          {"grid", grid_json(c.grid)},
          {"workers", c.workers}};
}

ExperimentConfig parse_experiment_config(const json& j) try {
  std::vector<std::string> issues;
  ExperimentConfig c;
  if (!j.is_object()) throw ConfigIssues({"<root>: expected object, got " + json_type(j)});
  if (!j.contains("format_version")) issues.push_back("format_version: required");
  check_shape(j, to_json(c), "", issues);
  if (!issues.empty()) throw ConfigIssues(issues);

  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) j.at(key).get_to(dst);
  };
  get("format_version", c.format_version);
  get("world_seed", c.world_seed);
  get("seeds", c.seeds);
  get("model_seed", c.model_seed);
  get("workers", c.workers);
  if (j.contains("language")) from_json(j.at("language"), c.language);
  if (j.contains("ssl")) from_json(j.at("ssl"), c.ssl);
  if (j.contains("split")) from_json(j.at("split"), c.split);
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("pretrain")) from_json(j.at("pretrain"), c.pretrain);
  if (j.contains("generator")) from_json(j.at("generator"), c.generator);
  if (j.contains("classifier")) from_json(j.at("classifier"), c.classifier);
  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    json rest = f;
    if (f.contains("strategy") && f.at("strategy").contains("kind")) {
      c.finetune.strategy.kind = kind_at(f.at("strategy").at("kind"), "finetune.strategy.kind", issues);
      rest["strategy"].erase("kind");
    }
    from_json(rest, c.finetune);
  }
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    auto& G = c.grid;
    auto gget = [&](const char* key, auto& dst) {
      if (g.contains(key)) g.at(key).get_to(dst);
    };
    gget("table_shots", G.table_shots);
    gget("table_minutes", G.table_minutes);
    gget("table2_ratios", G.table2_ratios);
    gget("table4_ratios", G.table4_ratios);
    gget("alphas", G.alphas);
    gget("asr_shots", G.asr_shots);
    gget("table5_ratio", G.table5_ratio);
    gget("fig3_shots", G.fig3_shots);
    gget("fig3_minutes", G.fig3_minutes);
    gget("proposed_ratio", G.proposed_ratio);
    if (g.contains("table2_combos")) {
      G.table2_combos.clear();
      const auto& arr = g.at("table2_combos");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        Combo co;
        const std::string p = "grid.table2_combos[" + std::to_string(i) + "]";
        if (arr[i].contains("mix_pretrain")) co.mix_pretrain = arr[i].at("mix_pretrain").get<bool>();
        if (arr[i].contains("strategy")) co.kind = kind_at(arr[i].at("strategy"), p + ".strategy", issues);
        else issues.push_back(p + ".strategy: required");
        G.table2_combos.push_back(co);
      }
    }
    if (g.contains("table4_kinds")) {
      G.table4_kinds.clear();
      const auto& arr = g.at("table4_kinds");
      for (std::size_t i = 0; i < arr.size(); ++i)
        G.table4_kinds.push_back(kind_at(arr[i], "grid.table4_kinds[" + std::to_string(i) + "]", issues));
    }
  }
  validate(c, issues);
  if (!issues.empty()) throw ConfigIssues(issues);
  return c;
} catch (const json::exception& e) {
  throw ConfigIssues({std::string("<root>: ") + e.what()});
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigIssues({path.string() + ": " + e.what()});
  }
  return parse_experiment_config(j);
}

std::string json_digest(const json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) h = (h ^ ch) * 0x100000001b3ULL;
  h = mix64(h);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string to_string(SuiteName s) {
  switch (s) {
    case SuiteName::Table2: return "table2";
    case SuiteName::Table4: return "table4";
    case SuiteName::Table5: return "table5";
    case SuiteName::Fig3: return "fig3";
  }
  return "?";
}

SuiteName suite_from_string(const std::string& s) {
  for (auto n : {SuiteName::Table2, SuiteName::Table4, SuiteName::Table5, SuiteName::Fig3})
    if (to_string(n) == s) return n;
  throw ConfigError("unknown suite '" + s + "' (expected table2, table4, table5 or fig3)");
}

std::string Cell::label() const {
  std::string s = method;
  if (has_ratio) s += "@" + percent(strategy.ratio);
  if (strategy.kind == StrategyKind::SoftMix) s += "/a=" + fmt(strategy.alpha);
  s += "/shots=" + std::to_string(tts_shots);
  if (asr_shots != tts_shots) s += "/asr=" + std::to_string(asr_shots);
  s += "/min=" + fmt(minutes);
  return s;
}

std::vector<Cell> suite_cells(SuiteName s, const ExperimentConfig& cfg) {
  const auto& g = cfg.grid;
  std::vector<Cell> out;
  auto base = [&](bool mp, StrategyKind k, double ratio) {
    Cell c;
    c.method = combo_label(mp, k);
    c.mix_pretrain = mp;
    c.strategy.kind = k;
    c.strategy.ratio = ratio;
    c.strategy.alpha = cfg.finetune.strategy.alpha;
    c.tts_shots = c.asr_shots = g.table_shots;
    c.minutes = g.table_minutes;
    return c;
  };
  switch (s) {
    case SuiteName::Table2:
      for (const auto& co : g.table2_combos)
        for (double r : g.table2_ratios) out.push_back(base(co.mix_pretrain, co.kind, r));
      break;
    case SuiteName::Table4:
      for (auto k : g.table4_kinds) {
        if (k == StrategyKind::Sampling) {
          Cell c = base(true, k, 1.0);
          c.has_ratio = false;
          out.push_back(c);
          continue;
        }
        for (double r : g.table4_ratios) {
          if (k == StrategyKind::SoftMix) {
            for (double a : g.alphas) {
              Cell c = base(true, k, r);
              c.strategy.alpha = a;
              out.push_back(c);
            }
          } else {
            out.push_back(base(true, k, r));
          }
        }
      }
      break;
    case SuiteName::Table5:
      for (int a : g.asr_shots)
        for (auto [mp, k] : {std::pair{true, StrategyKind::HardPhonemeMix}, std::pair{false, StrategyKind::SentenceFilter}}) {
          Cell c = base(mp, k, g.table5_ratio);
          c.asr_shots = a;
          out.push_back(c);
        }
      break;
    case SuiteName::Fig3:
      for (int shots : g.fig3_shots)
        for (double minutes : g.fig3_minutes) {
          auto method = [&](const std::string& name, bool mp, StrategyKind k, double r, bool init) {
            Cell c = base(mp, k, r);
            c.method = name;
            c.generator_init = init;
            c.tts_shots = c.asr_shots = shots;
            c.minutes = minutes;
            out.push_back(c);
          };
          // Without unlabeled speech only the initialized model has anything to adapt with.
          if (minutes > 0) {
            method("Baseline", false, StrategyKind::SentenceFilter, 1.0, false);
            method("Proposed", true, StrategyKind::HardPhonemeMix, g.proposed_ratio, false);
          }
          method("Proposed*", true, StrategyKind::HardPhonemeMix, g.proposed_ratio, true);
        }
      break;
  }
  return out;
}

// ---- Lab ----

Lab::Lab(ExperimentConfig cfg, std::optional<std::filesystem::path> cache_dir)
    : cfg_(std::move(cfg)), cache_dir_(std::move(cache_dir)), ssl_(cfg_.world_seed, cfg_.language.frame_dim, cfg_.ssl) {}

std::string Lab::pretrain_key(bool mp) const {
  PretrainConfig pc = cfg_.pretrain;
  if (!mp) pc.p_repr = 0.0;
  json j = {{"world_seed", cfg_.world_seed},
            {"language", to_json(cfg_.language)},
            {"ssl", to_json(cfg_.ssl)},
            {"source", {{"n_source_langs", cfg_.split.n_source_langs},
                        {"source_utterances", cfg_.split.source_utterances},
                        {"min_length", cfg_.split.min_length},
                        {"max_length", cfg_.split.max_length}}},
            {"model", to_json(cfg_.model)},
            {"model_seed", cfg_.model_seed},
            {"pretrain", to_json(pc)}};
  if (mp) j["generator"] = to_json(cfg_.generator);
  return json_digest(j);
}

const SynthModel& Lab::pretrained(bool mp) {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = models_.find(mp);
  if (it != models_.end()) return *it->second;

  const std::string key = pretrain_key(mp);
  std::optional<std::filesystem::path> file;
  if (cache_dir_) {
    file = *cache_dir_ / ("pretrain-" + key + ".ckpt");
    if (std::filesystem::exists(*file)) {
      auto m = std::make_unique<SynthModel>(SynthModel::load(*file));
      return *(models_[mp] = std::move(m));
    }
  }
  std::vector<ToyLanguage> langs;
  for (int l = 0; l < cfg_.split.n_source_langs; ++l) langs.push_back(gen_language(cfg_.world_seed, l, cfg_.language));
  const auto source = make_source(cfg_.world_seed, cfg_.split, langs);
  auto m = std::make_unique<SynthModel>(cfg_.model, cfg_.model_seed);
  PretrainConfig pc = cfg_.pretrain;
  if (!mp) pc.p_repr = 0.0;
  mix_pretrain(*m, source, langs, ssl_, pc);
  if (mp && cfg_.generator.steps > 0) train_embedding_generator(*m, source, langs, ssl_, cfg_.generator);
  if (file) {
    std::filesystem::create_directories(file->parent_path());
    const auto tmp = file->string() + ".tmp";
    m->save(tmp);
    std::filesystem::rename(tmp, *file);
  }
  return *(models_[mp] = std::move(m));
}

SplitConfig Lab::split_config(int shots, double minutes) const {
  SplitConfig s = cfg_.split;
  s.n_shots = shots;
  s.unlabeled_minutes = minutes;
  return s;
}

std::shared_ptr<const Lab::Data> Lab::build_data(std::uint64_t seed, int tts_shots, int asr_shots,
                                                 double minutes) const {
  auto d = std::make_shared<Data>();
  d->tts = make_split(cfg_.world_seed, seed, split_config(tts_shots, minutes), cfg_.language);
  d->pseudo_per = kNaN;
  if (d->tts.unpaired.empty()) return d;

  // The unpaired stream does not depend on the shot count, so a split with a different
  // labeled window shares the same speech.
  std::vector<Utterance> asr_labeled;
  if (asr_shots == tts_shots) {
    asr_labeled = d->tts.target;
  } else {
    SplitConfig sc = split_config(asr_shots, 0.0);
    sc.eval_size = 0;
    asr_labeled = make_split(cfg_.world_seed, seed, sc, cfg_.language).target;
  }
  std::vector<LayeredFeatures> feats;
  for (const auto& u : asr_labeled) feats.push_back(ssl_.features(u));
  const auto clf = train_frame_classifier(d->tts.target_language, asr_labeled, feats, cfg_.classifier, seed);
  d->pseudo = pseudo_label(clf, d->tts.unpaired, ssl_);
  d->pseudo_per = pseudo_label_per(d->pseudo, d->tts.withheld);
  return d;
}

RunResult Lab::run(const Data& data, const Cell& cell, std::uint64_t seed, SynthModel* tuned) {
  RunResult r;
  r.pseudo_per = data.pseudo_per;
  try {
    SynthModel m = pretrained(cell.mix_pretrain);
    FinetuneConfig fc = cfg_.finetune;
    fc.strategy = cell.strategy;
    fc.generator_init = cell.generator_init;
    fc.seed = derive_seed(cfg_.finetune.seed, {seed});
    FinetuneData fd{&data.tts.target_language, data.tts.target, data.pseudo, data.tts.unpaired, &ssl_};
    const auto stats = finetune(m, fd, fc);
    r.lambda = stats.threshold;
    r.kept_ratio = stats.kept_ratio;
    r.freeze_ok = stats.freeze_ok;
    r.per = evaluate_per(m, data.tts.target_language, data.tts.eval);
    std::uint64_t h = 0;
    for (const auto& p : m.params().all()) h = mix64(h ^ m.params().fingerprint(p.group));
    r.param_fingerprint = h;
    if (tuned) *tuned = std::move(m);
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
    r.per = r.lambda = r.kept_ratio = kNaN;
  }
  return r;
}

RunResult Lab::run(const Cell& cell, std::uint64_t seed, SynthModel* tuned) {
  std::shared_ptr<const Data> d;
  try {
    d = build_data(seed, cell.tts_shots, cell.asr_shots, cell.minutes);
  } catch (const std::exception& e) {
    RunResult r;
    r.ok = false;
    r.error = e.what();
    r.per = r.pseudo_per = r.lambda = r.kept_ratio = kNaN;
    return r;
  }
  return run(*d, cell, seed, tuned);
}

SuiteResult run_suite(SuiteName s, Lab& lab, int workers) {
  const auto& cfg = lab.config();
  SuiteResult out;
  out.suite = s;
  for (const auto& c : suite_cells(s, cfg)) out.cells.push_back({c, cfg.seeds, std::vector<RunResult>(cfg.seeds.size())});

  bool need_mp = false, need_nomp = false;
  for (const auto& c : out.cells) (c.cell.mix_pretrain ? need_mp : need_nomp) = true;
  if (need_mp) lab.pretrained(true);
  if (need_nomp) lab.pretrained(false);

  // One job per (seed, data setting); the cells sharing that data run inside it.
  struct Job {
    std::size_t seed_index;
    int tts_shots, asr_shots;
    double minutes;
    std::vector<std::size_t> cells;
  };
  std::vector<Job> jobs;
  for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
    for (std::size_t ci = 0; ci < out.cells.size(); ++ci) {
      const auto& c = out.cells[ci].cell;
      auto it = std::find_if(jobs.begin(), jobs.end(), [&](const Job& j) {
        return j.seed_index == si && j.tts_shots == c.tts_shots && j.asr_shots == c.asr_shots && j.minutes == c.minutes;
      });
      if (it == jobs.end()) jobs.push_back({si, c.tts_shots, c.asr_shots, c.minutes, {ci}});
      else it->cells.push_back(ci);
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) return;
      const auto& job = jobs[j];
      const std::uint64_t seed = cfg.seeds[job.seed_index];
      std::shared_ptr<const Lab::Data> data;
      std::string error;
      try {
        data = lab.build_data(seed, job.tts_shots, job.asr_shots, job.minutes);
      } catch (const std::exception& e) {
        error = e.what();
      }
      for (std::size_t ci : job.cells) {
        RunResult r;
        if (data) {
          r = lab.run(*data, out.cells[ci].cell, seed);
        } else {
          r.ok = false;
          r.error = error;
          r.per = r.pseudo_per = r.lambda = r.kept_ratio = kNaN;
        }
        out.cells[ci].runs[job.seed_index] = std::move(r);
      }
    }
  };
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  if (s == SuiteName::Table2) {
    // At ratio 100% λ = 0 and every strategy trains on the same data.
    json identity = json::array();
    for (bool mp : {true, false}) {
      std::vector<const CellResult*> group;
      for (const auto& c : out.cells)
        if (c.cell.mix_pretrain == mp && c.cell.strategy.ratio == 1.0) group.push_back(&c);
      if (group.size() < 2) continue;
      bool same = true;
      for (std::size_t si = 0; si < cfg.seeds.size(); ++si)
        for (const auto* c : group) {
          const auto& a = group.front()->runs[si];
          const auto& b = c->runs[si];
          same = same && a.ok && b.ok && a.param_fingerprint == b.param_fingerprint && a.per == b.per;
        }
      identity.push_back({{"mix_pretrain", mp}, {"cells", group.size()}, {"identical", same}});
    }
    out.checks["ratio100_identity"] = identity;
  }
  bool freeze = true;
  for (const auto& c : out.cells)
    for (const auto& r : c.runs) freeze = freeze && (!r.ok || r.freeze_ok);
  out.checks["freeze_ok"] = freeze;
  return out;
}

// ---- reporting ----

const std::vector<std::string>& results_header() {
  static const std::vector<std::string> h = {"suite",    "cell",      "method",  "mix_pretrain", "strategy",
                                             "ratio",    "alpha",     "tts_shots", "asr_shots",  "minutes",
                                             "generator_init", "seed", "aggregate", "n_seeds",   "metric",
                                             "value",    "std",       "status"};
  return h;
}

Summary summarize(const CellResult& c, double RunResult::*metric) {
  Summary s;
  double sum = 0.0;
  std::vector<double> vals;
  for (const auto& r : c.runs) {
    if (!r.ok || !std::isfinite(r.*metric)) continue;
    vals.push_back(r.*metric);
    sum += r.*metric;
  }
  s.n = static_cast<int>(vals.size());
  if (s.n == 0) {
    s.mean = s.std = kNaN;
    return s;
  }
  s.mean = sum / s.n;
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : vals) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / (s.n - 1));
  }
  return s;
}

namespace {

struct Metric {
  const char* name;
  double RunResult::*field;
};

double freeze_value(const RunResult& r) { return r.ok ? (r.freeze_ok ? 1.0 : 0.0) : kNaN; }

std::vector<std::string> cell_columns(SuiteName s, const Cell& c) {
  return {to_string(s),
          c.label(),
          c.method,
          c.mix_pretrain ? "1" : "0",
          to_string(c.strategy.kind),
          c.has_ratio ? fmt(c.strategy.ratio) : "",
          c.strategy.kind == StrategyKind::SoftMix ? fmt(c.strategy.alpha) : "",
          std::to_string(c.tts_shots),
          std::to_string(c.asr_shots),
          fmt(c.minutes),
          c.generator_init ? "1" : "0"};
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out + "\n";
}

const std::vector<Metric>& metrics() {
  static const std::vector<Metric> m = {{"per", &RunResult::per},
                                        {"pseudo_per", &RunResult::pseudo_per},
                                        {"lambda", &RunResult::lambda},
                                        {"kept_ratio", &RunResult::kept_ratio}};
  return m;
}

}  // namespace

std::string results_csv(const SuiteResult& r) {
  std::string out = join(results_header());
  for (const auto& c : r.cells) {
    const auto cols = cell_columns(r.suite, c.cell);
    for (std::size_t si = 0; si < c.runs.size(); ++si) {
      const auto& run = c.runs[si];
      auto row = [&](const std::string& metric, double value) {
        auto v = cols;
        v.insert(v.end(), {std::to_string(c.seeds[si]), "0", "1", metric, fmt(value), "", run.ok ? "ok" : "error"});
        out += join(v);
      };
      for (const auto& m : metrics()) row(m.name, run.*m.field);
      row("freeze_ok", freeze_value(run));
    }
    for (const auto& m : metrics()) {
      const auto s = summarize(c, m.field);
      auto v = cols;
      v.insert(v.end(), {"all", "1", std::to_string(s.n), m.name, fmt(s.mean), fmt(s.std), s.n > 0 ? "ok" : "error"});
      out += join(v);
    }
    int n = 0;
    double all = 1.0;
    for (const auto& run : c.runs)
      if (run.ok) {
        ++n;
        all = std::min(all, freeze_value(run));
      }
    auto v = cols;
    v.insert(v.end(), {"all", "1", std::to_string(n), "freeze_ok", n ? fmt(all) : "nan", "", n > 0 ? "ok" : "error"});
    out += join(v);
  }
  return out;
}

json results_json(const SuiteResult& r) {
  json cells = json::array();
  for (const auto& c : r.cells) {
    json runs = json::array();
    for (std::size_t si = 0; si < c.runs.size(); ++si) {
      const auto& run = c.runs[si];
      json j = {{"seed", c.seeds[si]}, {"status", run.ok ? "ok" : "error"}};
      if (!run.ok) j["error"] = run.error;
      for (const auto& m : metrics()) j[m.name] = std::isfinite(run.*m.field) ? json(run.*m.field) : json(nullptr);
      j["freeze_ok"] = run.freeze_ok;
      char buf[17];
      std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(run.param_fingerprint));
      j["param_fingerprint"] = buf;
      runs.push_back(j);
    }
    json agg = json::object();
    for (const auto& m : metrics()) {
      const auto s = summarize(c, m.field);
      agg[m.name] = {{"mean", std::isfinite(s.mean) ? json(s.mean) : json(nullptr)},
                     {"std", std::isfinite(s.std) ? json(s.std) : json(nullptr)},
                     {"n_seeds", s.n}};
    }
    const auto& cl = c.cell;
    cells.push_back({{"cell", cl.label()},
                     {"method", cl.method},
                     {"mix_pretrain", cl.mix_pretrain},
                     {"strategy", to_string(cl.strategy.kind)},
                     {"ratio", cl.has_ratio ? json(cl.strategy.ratio) : json(nullptr)},
                     {"alpha", cl.strategy.alpha},
                     {"tts_shots", cl.tts_shots},
                     {"asr_shots", cl.asr_shots},
                     {"minutes", cl.minutes},
                     {"generator_init", cl.generator_init},
                     {"runs", runs},
                     {"aggregate", agg}});
  }
  json out = {{"suite", to_string(r.suite)}, {"cells", cells}, {"checks", r.checks}};
  const auto checks = trend_checks(r);
  json trends = json::array();
  for (const auto& t : checks) trends.push_back({{"name", t.name}, {"pass", t.pass}, {"detail", t.detail}});
  out["trends"] = trends;
  return out;
}

std::map<std::string, std::string> suite_curves(const SuiteResult& r) {
  std::map<std::string, std::string> out;
  if (r.suite != SuiteName::Fig3) return out;
  // One curve per (method, shots): PER against unlabeled minutes.
  for (const auto& c : r.cells) {
    std::string stem = c.cell.method + "_shots" + std::to_string(c.cell.tts_shots);
    std::replace(stem.begin(), stem.end(), '*', 'X');
    auto& text = out[stem];
    if (text.empty()) text = "# minutes mean_per\n";
    text += fmt(c.cell.minutes) + " " + fmt(summarize(c, &RunResult::per).mean) + "\n";
  }
  return out;
}

const CellResult* find_cell(const SuiteResult& r, const std::function<bool(const Cell&)>& pred) {
  for (const auto& c : r.cells)
    if (pred(c.cell)) return &c;
  return nullptr;
}

namespace {

std::string describe(const Summary& a, const Summary& b) { return fmt(a.mean) + " vs " + fmt(b.mean); }

// Mean comparison plus per-seed wins (a <= b on the same seed).
TrendCheck paired(const std::string& name, const CellResult* a, const CellResult* b, bool strict, int min_wins) {
  TrendCheck t{name, false, ""};
  if (!a || !b) {
    t.detail = "cell missing from grid";
    return t;
  }
  const auto sa = summarize(*a, &RunResult::per), sb = summarize(*b, &RunResult::per);
  int wins = 0, n = 0;
  for (std::size_t i = 0; i < a->runs.size() && i < b->runs.size(); ++i) {
    if (!a->runs[i].ok || !b->runs[i].ok) continue;
    ++n;
    wins += a->runs[i].per <= b->runs[i].per;
  }
  const bool mean_ok = strict ? sa.mean < sb.mean : sa.mean <= sb.mean;
  const bool complete = n == static_cast<int>(a->runs.size()) && n > 0;
  t.pass = complete && mean_ok && wins >= min_wins;
  t.detail = describe(sa, sb) + ", per-seed wins " + std::to_string(wins) + "/" + std::to_string(n);
  return t;
}

int majority(std::size_t seeds) { return static_cast<int>(std::ceil(0.8 * static_cast<double>(seeds))); }

}  // namespace

std::vector<TrendCheck> trend_checks(const SuiteResult& r) {
  std::vector<TrendCheck> out;
  if (r.cells.empty()) return out;
  const std::size_t n = r.cells.front().seeds.size();
  auto cell = [&](bool mp, StrategyKind k, double ratio) {
    return find_cell(r, [&](const Cell& c) { return c.mix_pretrain == mp && c.strategy.kind == k && c.has_ratio && c.strategy.ratio == ratio; });
  };
  switch (r.suite) {
    case SuiteName::Table2: {
      out.push_back(paired("MP+PM@75% < noMP+SF@100%", cell(true, StrategyKind::HardPhonemeMix, 0.75),
                           cell(false, StrategyKind::SentenceFilter, 1.0), true, majority(n)));
      for (double ratio : {0.5, 0.75})
        out.push_back(paired("MP+PM < MP+SF @" + percent(ratio), cell(true, StrategyKind::HardPhonemeMix, ratio),
                             cell(true, StrategyKind::SentenceFilter, ratio), true, majority(n)));
      bool same = true;
      for (const auto& g : r.checks.value("ratio100_identity", json::array())) same = same && g.at("identical").get<bool>();
      out.push_back({"ratio 100% cells identical", same && r.checks.contains("ratio100_identity"), ""});
      break;
    }
    case SuiteName::Table4: {
      std::vector<double> hard;
      for (const auto& c : r.cells)
        if (c.cell.strategy.kind == StrategyKind::HardPhonemeMix) hard.push_back(summarize(c, &RunResult::per).mean);
      const auto* sampling = find_cell(r, [](const Cell& c) { return c.strategy.kind == StrategyKind::Sampling; });
      TrendCheck t{"Sampling within HardMix range", false, "cell missing from grid"};
      if (sampling && !hard.empty()) {
        const double lo = *std::min_element(hard.begin(), hard.end());
        const double hi = *std::max_element(hard.begin(), hard.end());
        const double s = summarize(*sampling, &RunResult::per).mean;
        t.pass = s >= lo && s <= hi;
        t.detail = fmt(s) + " in [" + fmt(lo) + ", " + fmt(hi) + "]";
      }
      out.push_back(t);
      break;
    }
    case SuiteName::Table5: {
      std::set<int> shots;
      for (const auto& c : r.cells) shots.insert(c.cell.asr_shots);
      bool all = true;
      std::string detail;
      double prev = std::numeric_limits<double>::infinity();
      bool mono = true;
      std::string mono_detail;
      for (int s : shots) {
        auto pick = [&](bool mp) {
          return find_cell(r, [&](const Cell& c) { return c.asr_shots == s && c.mix_pretrain == mp; });
        };
        const auto t = paired("", pick(true), pick(false), false, 0);
        all = all && t.pass;
        detail += "asr=" + std::to_string(s) + ": " + t.detail + "; ";
        if (const auto* c = pick(true)) {
          const double p = summarize(*c, &RunResult::pseudo_per).mean;
          mono = mono && p <= prev;
          prev = p;
          mono_detail += fmt(p) + " ";
        }
      }
      bool per_mono = true;
      std::string per_detail;
      for (bool mp : {true, false}) {
        double last = std::numeric_limits<double>::infinity();
        per_detail += mp ? "MP+PM:" : " noMP+SF:";
        for (int s : shots) {
          const auto* c = find_cell(r, [&](const Cell& x) { return x.asr_shots == s && x.mix_pretrain == mp; });
          if (!c) continue;
          const double p = summarize(*c, &RunResult::per).mean;
          per_mono = per_mono && p <= last;
          last = p;
          per_detail += " " + fmt(p);
        }
      }
      out.push_back({"MP+PM <= noMP+SF at every ASR shot count", all, detail});
      out.push_back({"pseudo-label PER non-increasing in ASR shots", mono, mono_detail});
      out.push_back({"PER non-increasing in ASR shots for both strategies", per_mono, per_detail});
      break;
    }
    case SuiteName::Fig3: {
      auto pick = [&](const std::string& method, int shots, double minutes) {
        return find_cell(r, [&](const Cell& c) { return c.method == method && c.tts_shots == shots && c.minutes == minutes; });
      };
      {
        const auto* with = pick("Proposed*", 4, 15.0);
        const auto* without = pick("Proposed*", 4, 0.0);
        TrendCheck t{"Proposed* 4-shot/15-min < 0.5 x 4-shot/0-min", false, "cell missing from grid"};
        if (with && without) {
          const double a = summarize(*with, &RunResult::per).mean, b = summarize(*without, &RunResult::per).mean;
          t.pass = a < 0.5 * b;
          t.detail = fmt(a) + " vs 0.5 x " + fmt(b);
        }
        out.push_back(t);
      }
      bool all = true;
      std::string detail;
      int cells = 0;
      for (const auto& c : r.cells) {
        if (c.cell.method != "Proposed" || c.cell.minutes <= 0) continue;
        const auto* base = pick("Baseline", c.cell.tts_shots, c.cell.minutes);
        const auto t = paired("", &c, base, false, 0);
        all = all && t.pass;
        ++cells;
        if (!t.pass) detail += c.cell.label() + ": " + t.detail + "; ";
      }
      out.push_back({"Proposed <= Baseline in every cell with minutes > 0", all && cells > 0,
                     detail.empty() ? std::to_string(cells) + " cells" : detail});
      bool star = true;
      std::string sdetail;
      for (const auto& c : r.cells) {
        if (c.cell.method != "Proposed*" || c.cell.tts_shots != 4 || c.cell.minutes <= 0) continue;
        const auto t = paired("", &c, pick("Proposed", 4, c.cell.minutes), false, 0);
        star = star && t.pass;
        sdetail += "min=" + fmt(c.cell.minutes) + ": " + t.detail + "; ";
      }
      out.push_back({"Proposed* <= Proposed at 4-shot cells", star, sdetail});
      break;
    }
  }
  return out;
}

}  // namespace plmix
