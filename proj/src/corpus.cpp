#include "plmix/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "plmix/container.hpp"
#include "plmix/errors.hpp"
#include "plmix/params.hpp"
#include "plmix/rng.hpp"

namespace plmix {

namespace {
enum Tag : std::uint64_t {
  kTagLanguage = 11,
  kTagSsl = 12,
  kTagSslNoise = 13,
  kTagNuisance = 14,
  kTagSource = 21,
  kTagTargetStream = 22,
  kTagUnpairedStream = 23,
  kTagEvalStream = 24,
  kTagRender = 31,
};

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}
}  // namespace

int ToyLanguage::local_id(int global) const {
  if (!owns(global)) {
    throw VocabularyError("phoneme id " + std::to_string(global) + " is not in language " +
                          std::to_string(index) + " (ids " + std::to_string(first_id()) + ".." +
                          std::to_string(first_id() + inventory_size() - 1) + ")");
  }
  return global - first_id();
}

double ToyLanguage::min_pairwise_distance() const {
  double best = INFINITY;
  for (std::size_t i = 0; i < prototypes.rows(); ++i)
    for (std::size_t j = i + 1; j < prototypes.rows(); ++j)
      best = std::min(best, squared_distance(prototypes.row(i), prototypes.row(j)));
  return std::sqrt(best);
}

ToyLanguage gen_language(std::uint64_t world_seed, int lang_index, const LanguageConfig& cfg) {
  if (cfg.phonemes < 2) throw ArgumentError("gen_language: need at least 2 phonemes");
  if (cfg.phonemes > kPhonemeIdStride) throw ArgumentError("gen_language: inventory too large");
  if (cfg.frame_dim < 2) throw ArgumentError("gen_language: frame dimension must be >= 2");
  if (cfg.min_duration < 1 || cfg.max_duration < cfg.min_duration)
    throw ArgumentError("gen_language: need 1 <= min_duration <= max_duration");
  if (cfg.noise < 0.0) throw ArgumentError("gen_language: noise must be non-negative");

  Rng rng(derive_seed(world_seed, {kTagLanguage, static_cast<std::uint64_t>(lang_index)}));
  ToyLanguage lang;
  lang.index = lang_index;
  lang.noise = cfg.noise;
  const double needed = std::max(cfg.min_separation, 4.0 * cfg.noise);
  bool ok = false;
  for (int attempt = 0; attempt < cfg.max_retries && !ok; ++attempt) {
    lang.prototypes = Tensor2(cfg.phonemes, cfg.frame_dim);
    for (double& v : lang.prototypes.values()) v = rng.uniform(-1.0, 1.0);
    ok = lang.min_pairwise_distance() > needed;
  }
  if (!ok) {
    throw GenerationError("gen_language: could not separate " + std::to_string(cfg.phonemes) +
                          " prototypes by " + std::to_string(needed) + " in " +
                          std::to_string(cfg.max_retries) +
                          " attempts; use a larger frame_dim or a smaller noise/min_separation");
  }
  for (int p = 0; p < cfg.phonemes; ++p) {
    const int lo = static_cast<int>(rng.uniform_int(cfg.min_duration, cfg.max_duration));
    const int hi = std::min(cfg.max_duration, lo + static_cast<int>(rng.uniform_int(0, 2)));
    lang.min_duration.push_back(lo);
    lang.max_duration.push_back(hi);
  }
  std::vector<int> rank(cfg.phonemes);
  for (int i = 0; i < cfg.phonemes; ++i) rank[i] = i;
  for (int i = cfg.phonemes - 1; i > 0; --i) std::swap(rank[i], rank[rng.uniform_int(0, i)]);
  double total = 0.0;
  for (int p = 0; p < cfg.phonemes; ++p) {
    lang.frequency.push_back(1.0 / std::pow(rank[p] + 1.0, cfg.zipf));
    total += lang.frequency.back();
  }
  for (double& f : lang.frequency) f /= total;
  return lang;
}

Utterance render_utterance(const ToyLanguage& lang, std::uint64_t id, std::vector<int> phonemes,
                           std::vector<int> durations, std::uint64_t seed) {
  if (phonemes.empty()) throw ArgumentError("render_utterance: empty transcript");
  if (phonemes.size() != durations.size())
    throw DimensionError("render_utterance: phoneme/duration length mismatch");
  const auto bounds = boundaries_from_durations(durations);
  Utterance u;
  u.id = id;
  u.language = lang.index;
  u.frames = Tensor2(bounds.back(), static_cast<std::size_t>(lang.frame_dim()));
  Rng rng(derive_seed(seed, {kTagRender}));
  std::size_t t = 0;
  for (std::size_t i = 0; i < phonemes.size(); ++i) {
    auto proto = lang.prototypes.row(static_cast<std::size_t>(lang.local_id(phonemes[i])));
    for (int r = 0; r < durations[i]; ++r, ++t) {
      auto row = u.frames.row(t);
      for (std::size_t c = 0; c < row.size(); ++c) {
        row[c] = proto[c];
        if (lang.noise > 0.0) row[c] += lang.noise * rng.normal();
      }
    }
  }
  u.phonemes = std::move(phonemes);
  u.durations = std::move(durations);
  return u;
}

Utterance gen_utterance(const ToyLanguage& lang, std::uint64_t seed, int min_length, int max_length,
                        std::uint64_t id) {
  if (min_length < 1 || max_length > 64 || min_length > max_length)
    throw ArgumentError("gen_utterance: length range must lie within [1, 64]");
  Rng rng(seed);
  const int length = static_cast<int>(rng.uniform_int(min_length, max_length));
  std::vector<int> phonemes, durations;
  int prev = -1;
  for (int i = 0; i < length; ++i) {
    int p;
    do {
      p = static_cast<int>(rng.categorical(lang.frequency));
    } while (p == prev);
    prev = p;
    phonemes.push_back(lang.global_id(p));
    durations.push_back(static_cast<int>(rng.uniform_int(lang.min_duration[p], lang.max_duration[p])));
  }
  return render_utterance(lang, id, std::move(phonemes), std::move(durations), rng.next_u64());
}

SslSimulator::SslSimulator(std::uint64_t world_seed, int frame_dim, SslConfig cfg)
    : world_seed_(world_seed), frame_dim_(frame_dim), cfg_(std::move(cfg)) {
  if (cfg_.layers < 2) throw ArgumentError("SslSimulator: need at least 2 layers");
  if (cfg_.dim < 1 || frame_dim < 1) throw ArgumentError("SslSimulator: bad dimensions");
  if (cfg_.layer_noise.empty()) cfg_.layer_noise = {1.0};
  if (!(cfg_.temporal_correlation >= 0.0 && cfg_.temporal_correlation < 1.0))
    throw ArgumentError("SslSimulator: temporal_correlation must lie in [0, 1)");
  Rng rng(derive_seed(world_seed, {kTagSsl}));
  const double map_scale = cfg_.gain / std::sqrt(static_cast<double>(frame_dim));
  const double nuis_scale = 1.0 / std::sqrt(static_cast<double>(std::max(cfg_.nuisance_dim, 1)));
  for (int k = 0; k < cfg_.layers; ++k) {
    Tensor2 a(frame_dim, cfg_.dim), c(1, cfg_.dim), b(std::max(cfg_.nuisance_dim, 0), cfg_.dim);
    for (double& v : a.values()) v = map_scale * rng.normal();
    for (double& v : c.values()) v = 0.5 * rng.normal();
    for (double& v : b.values()) v = nuis_scale * rng.normal();
    maps_.push_back(std::move(a));
    offsets_.push_back(std::move(c));
    nuisance_.push_back(std::move(b));
  }
}

LayeredFeatures SslSimulator::features(const Tensor2& frames, std::uint64_t utterance_id) const {
  if (frames.cols() != static_cast<std::size_t>(frame_dim_)) {
    throw DimensionError("SslSimulator: frames are " + frames.shape_str() + ", expected width " +
                         std::to_string(frame_dim_));
  }
  std::vector<double> u(static_cast<std::size_t>(std::max(cfg_.nuisance_dim, 0)));
  {
    Rng rng(derive_seed(world_seed_, {kTagNuisance, utterance_id}));
    for (double& v : u) v = cfg_.nuisance_scale * rng.normal();
  }
  LayeredFeatures out;
  for (int k = 0; k < cfg_.layers; ++k) {
    std::vector<double> bias(offsets_[k].values().begin(), offsets_[k].values().end());
    for (std::size_t m = 0; m < u.size(); ++m)
      for (int c = 0; c < cfg_.dim; ++c) bias[c] += u[m] * nuisance_[k](m, c);
    Tensor2 layer = affine_forward(frames, maps_[k], bias);
    const double scale = cfg_.noise * cfg_.layer_noise[k % cfg_.layer_noise.size()];
    if (scale > 0.0) {
      Rng rng(derive_seed(world_seed_, {kTagSslNoise, utterance_id, static_cast<std::uint64_t>(k)}));
      const double rho = cfg_.temporal_correlation;
      const double innovation = std::sqrt(1.0 - rho * rho);
      std::vector<double> state(static_cast<std::size_t>(cfg_.dim));
      for (std::size_t t = 0; t < layer.rows(); ++t) {
        auto row = layer.row(t);
        for (std::size_t c = 0; c < row.size(); ++c) {
          state[c] = t == 0 ? rng.normal() : rho * state[c] + innovation * rng.normal();
          row[c] += scale * state[c];
        }
      }
    }
    out.layers.push_back(std::move(layer));
  }
  return out;
}

std::uint64_t SslSimulator::fingerprint() const {
  ParamStore tmp;
  for (std::size_t k = 0; k < maps_.size(); ++k) {
    tmp.add("A" + std::to_string(k), "ssl", maps_[k]);
    tmp.add("c" + std::to_string(k), "ssl", offsets_[k]);
    tmp.add("B" + std::to_string(k), "ssl", nuisance_[k]);
  }
  return tmp.fingerprint("ssl");
}

LayeredFeatures ssl_features(const Utterance& u, std::uint64_t world_seed, const SslConfig& cfg) {
  return SslSimulator(world_seed, static_cast<int>(u.frames.cols()), cfg).features(u);
}

std::span<const int> WithheldTranscripts::phonemes(std::uint64_t id) const {
  auto it = store_.find(id);
  if (it == store_.end()) throw ArgumentError("no withheld transcript for utterance " + std::to_string(id));
  return it->second.phonemes;
}

std::span<const int> WithheldTranscripts::durations(std::uint64_t id) const {
  auto it = store_.find(id);
  if (it == store_.end()) throw ArgumentError("no withheld transcript for utterance " + std::to_string(id));
  return it->second.durations;
}

std::uint64_t make_utterance_id(Partition p, std::uint64_t run_seed, std::uint64_t index) {
  return (static_cast<std::uint64_t>(p) << 60) | ((run_seed & 0xFFFFFFULL) << 36) |
         (index & 0xFFFFFFFFFULL);
}

Partition partition_of(std::uint64_t id) { return static_cast<Partition>(id >> 60); }

std::size_t CorpusSplit::unpaired_frames() const {
  std::size_t n = 0;
  for (const auto& u : unpaired) n += u.frames.rows();
  return n;
}

std::vector<Utterance> make_source(std::uint64_t world_seed, const SplitConfig& cfg,
                                   const std::vector<ToyLanguage>& languages) {
  std::vector<Utterance> out;
  out.reserve(languages.size() * static_cast<std::size_t>(cfg.source_utterances));
  for (const auto& lang : languages) {
    for (int i = 0; i < cfg.source_utterances; ++i) {
      const auto l = static_cast<std::uint64_t>(lang.index);
      const auto idx = static_cast<std::uint64_t>(i);
      out.push_back(gen_utterance(lang, derive_seed(world_seed, {kTagSource, l, idx}), cfg.min_length,
                                  cfg.max_length,
                                  make_utterance_id(Partition::Source, 0, (l << 24) | idx)));
    }
  }
  return out;
}

CorpusSplit make_split(std::uint64_t world_seed, std::uint64_t run_seed, const SplitConfig& cfg,
                       const LanguageConfig& lang_cfg) {
  if (cfg.n_source_langs < 1) throw ArgumentError("make_split: need at least one source language");
  if (cfg.n_shots < 1) throw ArgumentError("make_split: n_shots must be positive");
  if (cfg.unlabeled_minutes < 0.0) throw ArgumentError("make_split: unlabeled_minutes must be >= 0");
  if (cfg.eval_size < 0) throw ArgumentError("make_split: eval_size must be >= 0");
  if (cfg.frames_per_second <= 0.0) throw ArgumentError("make_split: frames_per_second must be > 0");

  CorpusSplit split;
  split.world_seed = world_seed;
  split.run_seed = run_seed;
  split.config = cfg;
  split.language_config = lang_cfg;
  for (int l = 0; l < cfg.n_source_langs; ++l) split.source_languages.push_back(gen_language(world_seed, l, lang_cfg));
  split.target_language = gen_language(world_seed, cfg.n_source_langs, lang_cfg);
  split.source = make_source(world_seed, cfg, split.source_languages);

  const auto& target = split.target_language;
  auto candidate = [&](Tag tag, Partition part, std::uint64_t i) {
    return gen_utterance(target, derive_seed(world_seed, {tag, run_seed, i}), cfg.min_length,
                         cfg.max_length, make_utterance_id(part, run_seed, i));
  };

  // Labeled set: first window of the candidate stream covering the whole inventory.
  std::vector<Utterance> stream;
  const int needed = target.inventory_size();
  bool covered = false;
  for (int offset = 0; offset <= cfg.max_resample && !covered; ++offset) {
    while (stream.size() < static_cast<std::size_t>(offset + cfg.n_shots))
      stream.push_back(candidate(kTagTargetStream, Partition::Target, stream.size()));
    std::set<int> seen;
    for (int i = offset; i < offset + cfg.n_shots; ++i) seen.insert(stream[i].phonemes.begin(), stream[i].phonemes.end());
    if (static_cast<int>(seen.size()) == needed) {
      split.target.assign(stream.begin() + offset, stream.begin() + offset + cfg.n_shots);
      covered = true;
    }
  }
  if (!covered) {
    throw SplitError("make_split: no window of " + std::to_string(cfg.n_shots) +
                     " labeled utterances covers all " + std::to_string(needed) + " phonemes");
  }
  std::set<int> labeled_phonemes;
  for (const auto& u : split.target) labeled_phonemes.insert(u.phonemes.begin(), u.phonemes.end());

  const double budget = cfg.unlabeled_minutes * 60.0 * cfg.frames_per_second;
  std::size_t frames = 0;
  for (std::uint64_t i = 0; static_cast<double>(frames) < budget; ++i) {
    Utterance u = candidate(kTagUnpairedStream, Partition::Unpaired, i);
    frames += u.frame_count();
    split.withheld.add(u);
    split.unpaired.push_back(UnpairedUtterance{u.id, u.language, std::move(u.frames)});
  }

  const std::uint64_t max_eval_draws =
      static_cast<std::uint64_t>(cfg.max_resample) * std::max<std::uint64_t>(cfg.eval_size, 1);
  for (std::uint64_t i = 0; split.eval.size() < static_cast<std::size_t>(cfg.eval_size); ++i) {
    if (i >= max_eval_draws) throw SplitError("make_split: eval coverage unattainable");
    Utterance u = candidate(kTagEvalStream, Partition::Eval, i);
    const bool ok = std::all_of(u.phonemes.begin(), u.phonemes.end(),
                                [&](int p) { return labeled_phonemes.count(p) != 0; });
    if (ok) split.eval.push_back(std::move(u));
  }
  return split;
}

nlohmann::json to_json(const SplitConfig& c) {
  return {{"n_source_langs", c.n_source_langs}, {"source_utterances", c.source_utterances},
          {"n_shots", c.n_shots},               {"unlabeled_minutes", c.unlabeled_minutes},
          {"eval_size", c.eval_size},           {"min_length", c.min_length},
          {"max_length", c.max_length},         {"frames_per_second", c.frames_per_second},
          {"max_resample", c.max_resample}};
}

nlohmann::json to_json(const LanguageConfig& c) {
  return {{"phonemes", c.phonemes},         {"frame_dim", c.frame_dim},
          {"noise", c.noise},               {"min_duration", c.min_duration},
          {"max_duration", c.max_duration}, {"min_separation", c.min_separation},
          {"zipf", c.zipf},                 {"max_retries", c.max_retries}};
}

nlohmann::json to_json(const SslConfig& c) {
  return {{"layers", c.layers},           {"dim", c.dim},
          {"noise", c.noise},             {"layer_noise", c.layer_noise},
          {"nuisance_dim", c.nuisance_dim}, {"nuisance_scale", c.nuisance_scale},
          {"temporal_correlation", c.temporal_correlation}, {"gain", c.gain}};
}

#define PLMIX_READ(key) \
  if (j.contains(#key)) j.at(#key).get_to(c.key)

void from_json(const nlohmann::json& j, SplitConfig& c) {
  PLMIX_READ(n_source_langs);
  PLMIX_READ(source_utterances);
  PLMIX_READ(n_shots);
  PLMIX_READ(unlabeled_minutes);
  PLMIX_READ(eval_size);
  PLMIX_READ(min_length);
  PLMIX_READ(max_length);
  PLMIX_READ(frames_per_second);
  PLMIX_READ(max_resample);
}

void from_json(const nlohmann::json& j, LanguageConfig& c) {
  PLMIX_READ(phonemes);
  PLMIX_READ(frame_dim);
  PLMIX_READ(noise);
  PLMIX_READ(min_duration);
  PLMIX_READ(max_duration);
  PLMIX_READ(min_separation);
  PLMIX_READ(zipf);
  PLMIX_READ(max_retries);
}

void from_json(const nlohmann::json& j, SslConfig& c) {
  PLMIX_READ(layers);
  PLMIX_READ(dim);
  PLMIX_READ(noise);
  PLMIX_READ(layer_noise);
  PLMIX_READ(nuisance_dim);
  PLMIX_READ(nuisance_scale);
  PLMIX_READ(temporal_correlation);
  PLMIX_READ(gain);
}

#undef PLMIX_READ

// ---- serialization ----

namespace {

constexpr const char* kSplitKind = "corpus-partition";

void put_languages(Container& c, const CorpusSplit& s) {
  std::vector<const ToyLanguage*> langs;
  for (const auto& l : s.source_languages) langs.push_back(&l);
  langs.push_back(&s.target_language);
  std::vector<int> indices;
  for (const auto* l : langs) {
    const std::string p = "lang/" + std::to_string(l->index) + "/";
    indices.push_back(l->index);
    c.put(p + "prototypes", l->prototypes);
    c.put_ints(p + "min_duration", l->min_duration);
    c.put_ints(p + "max_duration", l->max_duration);
    c.put(p + "frequency", Tensor2::row_vector(l->frequency));
    c.put(p + "noise", Tensor2(1, 1, l->noise));
  }
  c.put_ints("lang/indices", indices);
}

ToyLanguage get_language(const Container& c, int index) {
  const std::string p = "lang/" + std::to_string(index) + "/";
  ToyLanguage l;
  l.index = index;
  l.prototypes = c.tensor(p + "prototypes");
  l.min_duration = c.ints(p + "min_duration");
  l.max_duration = c.ints(p + "max_duration");
  l.frequency = c.tensor(p + "frequency").storage();
  l.noise = c.tensor(p + "noise")(0, 0);
  return l;
}

void put_utterances(Container& c, const std::string& prefix, const std::vector<Utterance>& utts) {
  c.header()["count"] = utts.size();
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const auto& u = utts[i];
    const std::string p = prefix + std::to_string(i) + "/";
    c.put_u64(p + "id", std::vector<std::uint64_t>{u.id});
    c.put_ints(p + "language", std::vector<int>{u.language});
    c.put_ints(p + "phonemes", u.phonemes);
    c.put_ints(p + "durations", u.durations);
    c.put(p + "frames", u.frames);
  }
}

std::vector<Utterance> get_utterances(const Container& c, const std::string& prefix) {
  std::vector<Utterance> out;
  const auto n = c.header().at("count").get<std::size_t>();
  for (std::size_t i = 0; i < n; ++i) {
    const std::string p = prefix + std::to_string(i) + "/";
    Utterance u;
    u.id = c.u64s(p + "id").at(0);
    u.language = c.ints(p + "language").at(0);
    u.phonemes = c.ints(p + "phonemes");
    u.durations = c.ints(p + "durations");
    u.frames = c.tensor(p + "frames");
    out.push_back(std::move(u));
  }
  return out;
}

Container partition_container(const CorpusSplit& s, const std::string& name) {
  Container c(kSplitKind);
  c.header()["format_version"] = Container::kFormatVersion;
  c.header()["partition"] = name;
  c.header()["world_seed"] = s.world_seed;
  c.header()["run_seed"] = s.run_seed;
  c.header()["split_config"] = to_json(s.config);
  c.header()["language_config"] = to_json(s.language_config);
  c.header()["target_language"] = s.target_language.index;
  put_languages(c, s);
  return c;
}

}  // namespace

void save_split(const CorpusSplit& split, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto source = partition_container(split, "source");
  put_utterances(source, "utt/", split.source);
  source.save(dir / "source.plmc");

  auto target = partition_container(split, "target");
  put_utterances(target, "utt/", split.target);
  target.save(dir / "target.plmc");

  auto eval = partition_container(split, "eval");
  put_utterances(eval, "utt/", split.eval);
  eval.save(dir / "eval.plmc");

  auto unpaired = partition_container(split, "unpaired");
  unpaired.header()["count"] = split.unpaired.size();
  for (std::size_t i = 0; i < split.unpaired.size(); ++i) {
    const auto& u = split.unpaired[i];
    const std::string p = "utt/" + std::to_string(i) + "/";
    unpaired.put_u64(p + "id", std::vector<std::uint64_t>{u.id});
    unpaired.put_ints(p + "language", std::vector<int>{u.language});
    unpaired.put(p + "frames", u.frames);
    unpaired.put_ints("withheld/" + std::to_string(i) + "/phonemes", split.withheld.phonemes(u.id));
    unpaired.put_ints("withheld/" + std::to_string(i) + "/durations", split.withheld.durations(u.id));
  }
  unpaired.save(dir / "unpaired.plmc");
}

CorpusSplit load_split(const std::filesystem::path& dir) {
  for (const char* f : {"source.plmc", "target.plmc", "eval.plmc", "unpaired.plmc"}) {
    if (!std::filesystem::exists(dir / f))
      throw InputError("corpus file not found: " + (dir / f).string());
  }
  CorpusSplit s;
  const auto source = Container::load(dir / "source.plmc", kSplitKind);
  const auto& h = source.header();
  s.world_seed = h.at("world_seed").get<std::uint64_t>();
  s.run_seed = h.at("run_seed").get<std::uint64_t>();
  from_json(h.at("split_config"), s.config);
  from_json(h.at("language_config"), s.language_config);
  const int target_index = h.at("target_language").get<int>();
  for (int idx : source.ints("lang/indices")) {
    if (idx == target_index)
      s.target_language = get_language(source, idx);
    else
      s.source_languages.push_back(get_language(source, idx));
  }
  s.source = get_utterances(source, "utt/");
  s.target = get_utterances(Container::load(dir / "target.plmc", kSplitKind), "utt/");
  s.eval = get_utterances(Container::load(dir / "eval.plmc", kSplitKind), "utt/");

  const auto unpaired = Container::load(dir / "unpaired.plmc", kSplitKind);
  const auto n = unpaired.header().at("count").get<std::size_t>();
  for (std::size_t i = 0; i < n; ++i) {
    const std::string p = "utt/" + std::to_string(i) + "/";
    UnpairedUtterance u{unpaired.u64s(p + "id").at(0), unpaired.ints(p + "language").at(0),
                        unpaired.tensor(p + "frames")};
    Utterance hidden;
    hidden.id = u.id;
    hidden.phonemes = unpaired.ints("withheld/" + std::to_string(i) + "/phonemes");
    hidden.durations = unpaired.ints("withheld/" + std::to_string(i) + "/durations");
    s.withheld.add(hidden);
    s.unpaired.push_back(std::move(u));
  }
  return s;
}

}  // namespace plmix
