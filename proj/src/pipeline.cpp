#include "plmix/pipeline.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "plmix/errors.hpp"

namespace plmix {

namespace {

enum Tag : std::uint64_t {
  kTagEpoch = 101,
  kTagBranch = 102,
  kTagInit = 103,
  kTagGenerator = 104,
  kTagPlan = 105,
};

constexpr int kCurveWindow = 50;

/// Walks through shuffled epochs; the order of epoch e depends only on (seed, e).
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}
  std::size_t next() {
    if (pos_ == order_.size()) reshuffle();
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, {kTagEpoch, epoch_++}));
    for (std::size_t i = n_; i-- > 1;) std::swap(order_[i], order_[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    pos_ = 0;
  }
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

class CurveLogger {
 public:
  void add(double v) {
    sum_ += v;
    last_ = v;
    if (++count_ == kCurveWindow) flush();
  }
  void finish(StageStats& s) {
    if (count_ > 0) flush();
    s.loss_curve = curve_;
    s.final_loss = curve_.empty() ? 0.0 : curve_.back();
  }
  std::vector<double> curve() {
    if (count_ > 0) flush();
    return curve_;
  }

 private:
  void flush() {
    curve_.push_back(sum_ / count_);
    sum_ = 0.0;
    count_ = 0;
  }
  std::vector<double> curve_;
  double sum_ = 0.0, last_ = 0.0;
  int count_ = 0;
};

std::set<std::string> all_groups(const ParamStore& s) {
  std::set<std::string> out;
  for (const auto& p : s.all()) out.insert(p.group);
  return out;
}

/// Freezes every group except `trainable`; returns the previous frozen set.
std::set<std::string> freeze_all_except(ParamStore& s, const std::set<std::string>& trainable) {
  auto previous = s.frozen_groups();
  for (const auto& g : all_groups(s)) s.set_frozen(g, trainable.count(g) == 0);
  return previous;
}

void restore_frozen(ParamStore& s, const std::set<std::string>& frozen) {
  for (const auto& g : all_groups(s)) s.set_frozen(g, frozen.count(g) != 0);
}

void ensure_tables(SynthModel& m, std::span<const ToyLanguage> languages, std::uint64_t seed) {
  for (const auto& lang : languages) {
    if (m.has_language(lang.index)) continue;
    Rng rng(derive_seed(seed, {kTagInit, static_cast<std::uint64_t>(lang.index)}));
    m.init_embedding(lang.index, lang.inventory_size(), rng);
  }
}

void check_batch(int batch, int steps, const char* stage) {
  if (batch < 1) throw ConfigError(std::string(stage) + ".batch must be positive");
  if (steps < 0) throw ConfigError(std::string(stage) + ".steps must be non-negative");
}

}  // namespace

std::vector<std::string> finetune_groups(int target_language) {
  return {group::embedding(target_language), group::kPhonemeEncoder, group::kSharedEncoder, group::kDecoder,
          group::kDurationPredictor};
}

StageStats mix_pretrain(SynthModel& m, std::span<const Utterance> source, std::span<const ToyLanguage> languages,
                        const SslSimulator& ssl, const PretrainConfig& cfg) {
  check_batch(cfg.batch, cfg.steps, "pretrain");
  if (!(cfg.p_repr >= 0.0 && cfg.p_repr < 1.0)) throw ConfigError("pretrain.p_repr must lie in [0, 1)");
  if (source.empty()) throw TrainingError("mix_pretrain: empty source corpus");
  StageStats stats;
  std::set<int> langs_seen;
  for (const auto& u : source) langs_seen.insert(u.language);
  if (langs_seen.size() < 2)
    stats.warnings.push_back("mix_pretrain: source corpus holds a single language");
  ensure_tables(m, languages, cfg.seed);

  std::vector<LayeredFeatures> feats;
  if (cfg.p_repr > 0.0) {
    feats.reserve(source.size());
    for (const auto& u : source) feats.push_back(ssl.features(u));
  }

  std::set<std::string> trainable;
  for (const auto& g : all_groups(m.params()))
    if (g != group::kGenerator) trainable.insert(g);
  const auto previous = freeze_all_except(m.params(), trainable);

  Adam opt(cfg.adam);
  EpochSampler sampler(source.size(), cfg.seed);
  CurveLogger curve;
  const auto frame_dim = static_cast<double>(m.config().frame_dim);
  std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch));
  std::vector<Branch> branch(idx.size());
  for (int step = 0; step < cfg.steps; ++step) {
    Normalizers norm;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      idx[b] = sampler.next();
      Rng brng(derive_seed(cfg.seed, {kTagBranch, static_cast<std::uint64_t>(step), b}));
      branch[b] = brng.bernoulli(cfg.p_repr) ? Branch::Representation : Branch::Phoneme;
      (branch[b] == Branch::Phoneme ? stats.phoneme_samples : stats.representation_samples)++;
      norm.frame += static_cast<double>(source[idx[b]].frame_count()) * frame_dim;
      norm.duration += static_cast<double>(source[idx[b]].length());
    }
    m.params().zero_grad();
    double loss = 0.0;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& u = source[idx[b]];
      Example ex;
      ex.language = u.language;
      ex.phonemes = u.phonemes;
      ex.durations = u.durations;
      ex.target = &u.frames;
      ex.branch = branch[b];
      if (branch[b] == Branch::Representation) ex.features = &feats[idx[b]];
      loss += forward_loss(m, ex, norm).total();
    }
    opt.step(m.params());
    curve.add(loss);
  }
  restore_frozen(m.params(), previous);
  curve.finish(stats);
  m.metadata()["pretrain_p_repr"] = cfg.p_repr;
  m.metadata()["pretrain_steps"] = cfg.steps;
  return stats;
}

Tensor2 double_average(const SynthModel& m, int inventory, int language, std::span<const Utterance> labeled,
                       std::span<const LayeredFeatures> features, std::vector<bool>* covered) {
  if (labeled.size() != features.size())
    throw DimensionError("double_average: one feature stack per utterance is required");
  const auto h = static_cast<std::size_t>(m.config().hidden);
  Tensor2 sums(static_cast<std::size_t>(inventory), h);
  std::vector<int> counts(static_cast<std::size_t>(inventory), 0);
  const int first = language * kPhonemeIdStride;
  for (std::size_t u = 0; u < labeled.size(); ++u) {
    const auto& utt = labeled[u];
    const auto bounds = utt.boundaries();
    const auto enc = rep_encode(m, features[u], bounds);
    for (std::size_t i = 0; i < utt.length(); ++i) {
      const int local = utt.phonemes[i] - first;
      if (local < 0 || local >= inventory)
        throw VocabularyError("double_average: phoneme " + std::to_string(utt.phonemes[i]) +
                              " outside language " + std::to_string(language));
      auto dst = sums.row(static_cast<std::size_t>(local));
      auto src = enc.output.row(i);
      for (std::size_t c = 0; c < h; ++c) dst[c] += src[c];
      counts[static_cast<std::size_t>(local)]++;
    }
  }
  if (covered) covered->assign(counts.size(), false);
  for (std::size_t p = 0; p < counts.size(); ++p) {
    if (counts[p] == 0) continue;
    if (covered) (*covered)[p] = true;
    for (double& v : sums.row(p)) v /= counts[p];
  }
  return sums;
}

Tensor2 generate_table(const SynthModel& m, const ToyLanguage& target, std::span<const Utterance> labeled,
                       std::span<const LayeredFeatures> features) {
  std::vector<bool> covered;
  const Tensor2 avg = double_average(m, target.inventory_size(), target.index, labeled, features, &covered);
  std::string missing;
  for (std::size_t p = 0; p < covered.size(); ++p)
    if (!covered[p]) missing += (missing.empty() ? "" : ", ") + std::to_string(target.global_id(static_cast<int>(p)));
  if (!missing.empty())
    throw CoverageError("generate_table: phonemes missing from the labeled set: " + missing);
  const auto& s = m.params();
  return affine_forward(avg, s[m.index().generator.W].value, s[m.index().generator.b].value);
}

StageStats train_embedding_generator(SynthModel& m, std::span<const Utterance> source,
                                     std::span<const ToyLanguage> languages, const SslSimulator& ssl,
                                     const GeneratorConfig& cfg) {
  check_batch(cfg.batch, cfg.steps, "generator");
  if (cfg.support < 1 || cfg.support >= cfg.batch)
    throw ConfigError("generator.support must lie in [1, batch)");
  if (languages.empty()) throw TrainingError("train_embedding_generator: no source languages");
  std::map<int, std::vector<std::size_t>> by_lang;
  for (std::size_t i = 0; i < source.size(); ++i) by_lang[source[i].language].push_back(i);
  for (const auto& lang : languages)
    if (by_lang[lang.index].size() < static_cast<std::size_t>(cfg.batch))
      throw TrainingError("train_embedding_generator: language " + std::to_string(lang.index) +
                          " has fewer utterances than one batch");

  StageStats stats;
  const auto previous = freeze_all_except(m.params(), {group::kGenerator});
  std::map<std::size_t, LayeredFeatures> feats;
  auto features_of = [&](std::size_t i) -> const LayeredFeatures& {
    auto it = feats.find(i);
    if (it == feats.end()) it = feats.emplace(i, ssl.features(source[i])).first;
    return it->second;
  };

  Adam opt(cfg.adam);
  Rng rng(derive_seed(cfg.seed, {kTagGenerator}));
  CurveLogger curve;
  const auto frame_dim = static_cast<double>(m.config().frame_dim);
  auto& W = m.params()[m.index().generator.W];
  auto& bias = m.params()[m.index().generator.b];
  for (int step = 0; step < cfg.steps; ++step) {
    const auto& lang = languages[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(languages.size()) - 1))];
    const auto& pool = by_lang[lang.index];
    std::vector<std::size_t> pick;
    bool ok = false;
    for (int attempt = 0; attempt <= cfg.max_retries && !ok; ++attempt) {
      pick.clear();
      std::set<std::size_t> used;
      while (pick.size() < static_cast<std::size_t>(cfg.batch)) {
        const auto i = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
        if (used.insert(i).second) pick.push_back(i);
      }
      std::set<int> support_ph;
      for (int s = 0; s < cfg.support; ++s)
        support_ph.insert(source[pick[s]].phonemes.begin(), source[pick[s]].phonemes.end());
      ok = true;
      for (std::size_t q = static_cast<std::size_t>(cfg.support); q < pick.size() && ok; ++q)
        for (int p : source[pick[q]].phonemes)
          if (!support_ph.count(p)) ok = false;
    }
    if (!ok) {
      throw TrainingError("train_embedding_generator: support set failed to cover the query phonemes after " +
                          std::to_string(cfg.max_retries) + " retries");
    }
    std::vector<Utterance> support;
    std::vector<LayeredFeatures> support_feats;
    for (int s = 0; s < cfg.support; ++s) {
      support.push_back(source[pick[s]]);
      support_feats.push_back(features_of(pick[s]));
    }
    const Tensor2 avg = double_average(m, lang.inventory_size(), lang.index, support, support_feats);
    const Tensor2 table = affine_forward(avg, W.value, bias.value);
    Tensor2 d_table(table.rows(), table.cols());

    Normalizers norm;
    for (std::size_t q = static_cast<std::size_t>(cfg.support); q < pick.size(); ++q) {
      norm.frame += static_cast<double>(source[pick[q]].frame_count()) * frame_dim;
      norm.duration += static_cast<double>(source[pick[q]].length());
    }
    m.params().zero_grad();
    double loss = 0.0;
    for (std::size_t q = static_cast<std::size_t>(cfg.support); q < pick.size(); ++q) {
      const auto& u = source[pick[q]];
      Example ex;
      ex.language = u.language;
      ex.phonemes = u.phonemes;
      ex.durations = u.durations;
      ex.target = &u.frames;
      ex.table = &table;
      ex.table_grad = &d_table;
      loss += forward_loss(m, ex, norm).total();
    }
    affine_backward(avg, W.value, d_table, nullptr, W.grad, bias.grad.values());
    opt.step(m.params());
    curve.add(loss);
  }
  restore_frozen(m.params(), previous);
  curve.finish(stats);
  m.metadata()["generator_steps"] = cfg.steps;
  return stats;
}

FinetuneStats finetune(SynthModel& m, const FinetuneData& data, FinetuneConfig cfg) {
  check_batch(cfg.batch, cfg.steps, "finetune");
  cfg.strategy.validate();
  if (data.target == nullptr || data.ssl == nullptr) throw ArgumentError("finetune: target language and SSL model required");
  if (data.pseudo.size() != data.speech.size())
    throw AlignmentError("finetune: pseudo corpus and unpaired speech differ in size");
  const StrategyKind kind = cfg.strategy.kind;
  if (is_mixing(kind) && !data.pseudo.empty()) {
    const auto p = m.pretrained_p_repr();
    if (!p || *p <= 0.0) {
      throw ConfigError("strategy." + to_string(kind) +
                        " replaces phoneme encodings with representation encodings and needs a checkpoint "
                        "pretrained with p_repr > 0");
    }
  }
  const ToyLanguage& target = *data.target;
  const int lang = target.index;
  const auto frame_dim = static_cast<double>(m.config().frame_dim);

  if (cfg.generator_init) {
    std::vector<LayeredFeatures> feats;
    for (const auto& u : data.labeled) feats.push_back(data.ssl->features(u));
    m.set_embedding(lang, generate_table(m, target, data.labeled, feats));
  } else {
    Rng rng(derive_seed(cfg.seed, {kTagInit, static_cast<std::uint64_t>(lang)}));
    m.init_embedding(lang, target.inventory_size(), rng);
  }

  FinetuneStats stats;
  const auto groups = finetune_groups(lang);
  const auto previous = freeze_all_except(m.params(), {groups.begin(), groups.end()});
  const auto rep_before = m.params().fingerprint(group::kRepresentationEncoder);
  const auto ssl_before = data.ssl->fingerprint();

  // Threshold and the resulting pseudo label ratio.
  MixStrategy& strategy = cfg.strategy;
  if (!data.pseudo.empty()) {
    calibrate(strategy, data.pseudo);
    std::size_t kept = 0, total = 0;
    double conf_sum = 0.0;
    for (const auto& u : data.pseudo) {
      if (is_sentence_level(kind)) {
        ++total;
        kept += u.sentence_confidence() >= strategy.threshold;
      } else {
        for (const auto& r : u.runs) {
          ++total;
          kept += r.confidence >= strategy.threshold;
          conf_sum += r.confidence;
        }
      }
    }
    stats.kept_ratio = kind == StrategyKind::Sampling ? conf_sum / static_cast<double>(total)
                                                      : static_cast<double>(kept) / static_cast<double>(total);
  }
  stats.threshold = strategy.threshold;

  struct PseudoItem {
    std::vector<int> phonemes, durations;
    std::vector<double> confidences;
    SelectionPlan plan;  // fixed plan for deterministic kinds
    Tensor2 c_repr;
  };
  const bool stochastic = kind == StrategyKind::SoftMix || kind == StrategyKind::Sampling;
  std::vector<PseudoItem> pseudo(data.pseudo.size());
  struct Item {
    bool is_pseudo;
    std::size_t index;
  };
  std::vector<Item> items;
  for (std::size_t i = 0; i < data.labeled.size(); ++i) items.push_back({false, i});
  for (std::size_t i = 0; i < data.pseudo.size(); ++i) {
    auto& it = pseudo[i];
    const auto& pu = data.pseudo[i];
    if (pu.frame_count() != data.speech[i].frames.rows() || pu.id != data.speech[i].id)
      throw AlignmentError("finetune: pseudo utterance " + std::to_string(pu.id) + " does not match its speech");
    it.phonemes = pu.phonemes();
    it.durations = pu.durations();
    it.confidences = pu.confidences();
    if (!stochastic) {
      Rng unused(0);
      it.plan = make_plan(strategy, it.confidences, it.durations, unused);
      if (!it.plan.keep_sentence) continue;
    }
    if (is_mixing(kind) && (stochastic || !it.plan.all_phoneme())) {
      const auto feats = data.ssl->features(data.speech[i].frames, pu.id);
      const auto bounds = boundaries_from_durations(it.durations);
      it.c_repr = rep_encode(m, feats, bounds).output;
    }
    items.push_back({true, i});
  }
  stats.items = items.size();
  if (items.empty()) throw TrainingError("finetune: no training data left after selection");

  Adam opt(cfg.adam);
  EpochSampler sampler(items.size(), cfg.seed);
  CurveLogger curve;
  std::vector<Item> batch(static_cast<std::size_t>(cfg.batch));
  std::vector<SelectionPlan> plans(batch.size());
  for (int step = 0; step < cfg.steps; ++step) {
    Normalizers norm;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      batch[b] = items[sampler.next()];
      if (!batch[b].is_pseudo) {
        const auto& u = data.labeled[batch[b].index];
        norm.frame += static_cast<double>(u.frame_count()) * frame_dim;
        norm.duration += static_cast<double>(u.length());
        continue;
      }
      auto& it = pseudo[batch[b].index];
      if (stochastic) {
        Rng prng(derive_seed(cfg.seed, {kTagPlan, data.pseudo[batch[b].index].id, static_cast<std::uint64_t>(step)}));
        plans[b] = make_plan(strategy, it.confidences, it.durations, prng);
      } else {
        plans[b] = it.plan;
      }
      for (double v : plans[b].frame_mask) norm.frame += v * frame_dim;
      for (double v : plans[b].duration_mask) norm.duration += v;
    }
    m.params().zero_grad();
    double loss = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      Example ex;
      ex.language = lang;
      if (!batch[b].is_pseudo) {
        const auto& u = data.labeled[batch[b].index];
        ex.phonemes = u.phonemes;
        ex.durations = u.durations;
        ex.target = &u.frames;
      } else {
        const auto& it = pseudo[batch[b].index];
        const auto& plan = plans[b];
        ex.phonemes = it.phonemes;
        ex.durations = it.durations;
        ex.target = &data.speech[batch[b].index].frames;
        ex.frame_mask = plan.frame_mask;
        ex.duration_mask = plan.duration_mask;
        if (!plan.all_phoneme()) {
          ex.choice = plan.choice;
          ex.fixed_repr = &it.c_repr;
        }
      }
      loss += forward_loss(m, ex, norm).total();
    }
    opt.step(m.params());
    curve.add(loss);
  }
  restore_frozen(m.params(), previous);
  stats.loss_curve = curve.curve();
  stats.final_loss = stats.loss_curve.empty() ? 0.0 : stats.loss_curve.back();
  stats.freeze_ok = m.params().fingerprint(group::kRepresentationEncoder) == rep_before &&
                    data.ssl->fingerprint() == ssl_before;
  m.metadata()["finetune_strategy"] = to_string(kind);
  return stats;
}

// ---- JSON ----

nlohmann::json to_json(const AdamConfig& c) {
  return {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"warmup_steps", c.warmup_steps}};
}

#define PLMIX_READ(key) \
  if (j.contains(#key)) j.at(#key).get_to(c.key)

void from_json(const nlohmann::json& j, AdamConfig& c) {
  PLMIX_READ(lr);
  PLMIX_READ(beta1);
  PLMIX_READ(beta2);
  PLMIX_READ(eps);
  PLMIX_READ(warmup_steps);
}

nlohmann::json to_json(const PretrainConfig& c) {
  return {{"p_repr", c.p_repr}, {"steps", c.steps}, {"batch", c.batch}, {"adam", to_json(c.adam)}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  PLMIX_READ(p_repr);
  PLMIX_READ(steps);
  PLMIX_READ(batch);
  PLMIX_READ(seed);
  if (j.contains("adam")) from_json(j.at("adam"), c.adam);
}

nlohmann::json to_json(const GeneratorConfig& c) {
  return {{"steps", c.steps},     {"batch", c.batch}, {"support", c.support}, {"max_retries", c.max_retries},
          {"adam", to_json(c.adam)}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  PLMIX_READ(steps);
  PLMIX_READ(batch);
  PLMIX_READ(support);
  PLMIX_READ(max_retries);
  PLMIX_READ(seed);
  if (j.contains("adam")) from_json(j.at("adam"), c.adam);
}

nlohmann::json to_json(const MixStrategy& s) {
  return {{"kind", to_string(s.kind)}, {"ratio", s.ratio}, {"alpha", s.alpha}};
}

void from_json(const nlohmann::json& j, MixStrategy& c) {
  if (j.contains("kind")) c.kind = strategy_kind_from_string(j.at("kind").get<std::string>());
  PLMIX_READ(ratio);
  PLMIX_READ(alpha);
}

nlohmann::json to_json(const FinetuneConfig& c) {
  return {{"strategy", to_json(c.strategy)}, {"steps", c.steps}, {"batch", c.batch},
          {"adam", to_json(c.adam)},         {"seed", c.seed},   {"generator_init", c.generator_init}};
}

void from_json(const nlohmann::json& j, FinetuneConfig& c) {
  PLMIX_READ(steps);
  PLMIX_READ(batch);
  PLMIX_READ(seed);
  PLMIX_READ(generator_init);
  if (j.contains("adam")) from_json(j.at("adam"), c.adam);
  if (j.contains("strategy")) from_json(j.at("strategy"), c.strategy);
}

#undef PLMIX_READ

}  // namespace plmix
