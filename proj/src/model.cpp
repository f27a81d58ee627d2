#include "plmix/model.hpp"

#include <algorithm>
#include <cmath>

#include "plmix/container.hpp"
#include "plmix/errors.hpp"
#include "plmix/losses.hpp"

namespace plmix {

namespace {

constexpr std::size_t kMaxPositions = 2048;
constexpr const char* kCheckpointKind = "model-checkpoint";

const Tensor2& position_table(const ModelConfig& cfg) {
  thread_local std::map<std::pair<int, double>, Tensor2> cache;
  auto key = std::make_pair(cfg.hidden, cfg.position_scale);
  auto it = cache.find(key);
  if (it == cache.end())
    it = cache.emplace(key, position_features(kMaxPositions, cfg.hidden, cfg.position_scale)).first;
  return it->second;
}

void add_positions(Tensor2& x, const ModelConfig& cfg) {
  if (!cfg.position_features) return;
  if (x.rows() > kMaxPositions)
    throw DimensionError("sequence of " + std::to_string(x.rows()) + " exceeds position table");
  const auto& pe = position_table(cfg);
  auto xv = x.values();
  auto pv = pe.values();
  for (std::size_t i = 0; i < xv.size(); ++i) xv[i] += pv[i];
}

std::vector<SynthModel::Layer> add_blocks(ParamStore& s, const std::string& prefix,
                                          const std::string& grp, int count, int h, Rng& rng) {
  std::vector<SynthModel::Layer> out;
  for (int i = 0; i < count; ++i) {
    const std::string p = prefix + "/b" + std::to_string(i);
    SynthModel::Layer l;
    l.W = s.add(p + "/W", grp, uniform_init(h, h, h, rng));
    l.b = s.add(p + "/b", grp, uniform_init(1, h, h, rng));
    out.push_back(l);
  }
  return out;
}

SynthModel::Layer add_affine(ParamStore& s, const std::string& prefix, const std::string& grp,
                             int in, int out, Rng& rng) {
  SynthModel::Layer l;
  l.W = s.add(prefix + "/W", grp, uniform_init(in, out, in, rng));
  l.b = s.add(prefix + "/b", grp, uniform_init(1, out, in, rng));
  return l;
}

Tensor2 run_blocks(const ParamStore& s, const std::vector<SynthModel::Layer>& layers, Tensor2 x,
                   std::vector<BlockCache>* caches) {
  if (caches) caches->resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i)
    x = block_forward(x, s[layers[i].W].value, s[layers[i].b].value, caches ? &(*caches)[i] : nullptr);
  return x;
}

Tensor2 run_blocks_backward(ParamStore& s, const std::vector<SynthModel::Layer>& layers,
                            const std::vector<BlockCache>& caches, Tensor2 d) {
  for (std::size_t i = layers.size(); i-- > 0;) {
    auto& W = s[layers[i].W];
    auto& b = s[layers[i].b];
    d = block_backward(caches[i], W.value, d, W.grad, b.grad);
  }
  return d;
}

}  // namespace

std::string group::embedding(int language) { return "embedding/" + std::to_string(language); }

nlohmann::json to_json(const ModelConfig& c) {
  return {{"hidden", c.hidden},
          {"frame_dim", c.frame_dim},
          {"ssl_dim", c.ssl_dim},
          {"ssl_layers", c.ssl_layers},
          {"phoneme_blocks", c.phoneme_blocks},
          {"representation_blocks", c.representation_blocks},
          {"shared_blocks", c.shared_blocks},
          {"decoder_blocks", c.decoder_blocks},
          {"position_features", c.position_features},
          {"position_scale", c.position_scale}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
#define PLMIX_READ(key) \
  if (j.contains(#key)) j.at(#key).get_to(c.key)
  PLMIX_READ(hidden);
  PLMIX_READ(frame_dim);
  PLMIX_READ(ssl_dim);
  PLMIX_READ(ssl_layers);
  PLMIX_READ(phoneme_blocks);
  PLMIX_READ(representation_blocks);
  PLMIX_READ(shared_blocks);
  PLMIX_READ(decoder_blocks);
  PLMIX_READ(position_features);
  PLMIX_READ(position_scale);
#undef PLMIX_READ
}

SynthModel::SynthModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.hidden < 1 || cfg_.frame_dim < 1 || cfg_.ssl_dim < 1 || cfg_.ssl_layers < 2)
    throw ArgumentError("SynthModel: bad dimensions");
  Rng rng(derive_seed(seed, {0x6d6f64656cULL}));
  const int h = cfg_.hidden;
  idx_.phoneme = add_blocks(store_, "phn", group::kPhonemeEncoder, cfg_.phoneme_blocks, h, rng);
  idx_.rep_weights.W = store_.add("rep/layer_weights", group::kRepresentationEncoder,
                                  uniform_init(1, cfg_.ssl_layers, cfg_.ssl_layers, rng));
  idx_.rep_weights.b = idx_.rep_weights.W;
  idx_.rep_in = add_affine(store_, "rep/in", group::kRepresentationEncoder, cfg_.ssl_dim, h, rng);
  idx_.representation =
      add_blocks(store_, "rep", group::kRepresentationEncoder, cfg_.representation_blocks, h, rng);
  idx_.shared = add_blocks(store_, "shared", group::kSharedEncoder, cfg_.shared_blocks, h, rng);
  idx_.duration = add_affine(store_, "dur", group::kDurationPredictor, h, 1, rng);
  idx_.decoder = add_blocks(store_, "dec", group::kDecoder, cfg_.decoder_blocks, h, rng);
  idx_.output = add_affine(store_, "dec/out", group::kDecoder, h, cfg_.frame_dim, rng);
  Tensor2 eye(h, h);
  for (int i = 0; i < h; ++i) eye(i, i) = 1.0;
  idx_.generator.W = store_.add("gen/W", group::kGenerator, std::move(eye));
  idx_.generator.b = store_.add("gen/b", group::kGenerator, Tensor2(1, h));
}

void SynthModel::init_embedding(int language, int inventory, Rng& rng) {
  set_embedding(language, uniform_init(inventory, cfg_.hidden, cfg_.hidden, rng));
}

void SynthModel::set_embedding(int language, Tensor2 table) {
  if (table.cols() != static_cast<std::size_t>(cfg_.hidden) || table.rows() == 0 ||
      table.rows() > static_cast<std::size_t>(kPhonemeIdStride)) {
    throw DimensionError("set_embedding: table " + table.shape_str() + " for hidden size " +
                         std::to_string(cfg_.hidden));
  }
  auto it = tables_.find(language);
  if (it == tables_.end()) {
    tables_[language] = store_.add("emb/" + std::to_string(language), group::embedding(language),
                                   std::move(table));
  } else {
    store_.replace(it->second, std::move(table));
  }
}

bool SynthModel::has_language(int language) const { return tables_.count(language) != 0; }

const Tensor2& SynthModel::embedding(int language) const {
  auto it = tables_.find(language);
  if (it == tables_.end())
    throw VocabularyError("no embedding table for language " + std::to_string(language));
  return store_[it->second].value;
}

int SynthModel::inventory(int language) const { return static_cast<int>(embedding(language).rows()); }

std::vector<int> SynthModel::languages() const {
  std::vector<int> out;
  for (const auto& [l, _] : tables_) out.push_back(l);
  return out;
}

std::optional<double> SynthModel::pretrained_p_repr() const {
  if (!metadata_.contains("pretrain_p_repr")) return std::nullopt;
  return metadata_.at("pretrain_p_repr").get<double>();
}

void SynthModel::save(const std::filesystem::path& path) const {
  Container c(kCheckpointKind);
  c.header()["format_version"] = Container::kFormatVersion;
  c.header()["model_config"] = to_json(cfg_);
  c.header()["metadata"] = metadata_;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : store_.all()) {
    params.push_back({{"name", p.name}, {"group", p.group}});
    c.put("param/" + p.name, p.value);
  }
  c.header()["params"] = params;
  nlohmann::json langs = nlohmann::json::array();
  for (const auto& [l, _] : tables_) langs.push_back(l);
  c.header()["languages"] = langs;
  c.header()["frozen_groups"] = store_.frozen_groups();
  c.save(path);
}

SynthModel SynthModel::load(const std::filesystem::path& path) {
  const auto c = Container::load(path, kCheckpointKind);
  ModelConfig cfg;
  from_json(c.header().at("model_config"), cfg);
  SynthModel m(cfg, 0);
  m.metadata_ = c.header().at("metadata");
  for (int l : c.header().at("languages")) {
    m.set_embedding(l, c.tensor("param/emb/" + std::to_string(l)));
  }
  for (const auto& p : c.header().at("params")) {
    const auto name = p.at("name").get<std::string>();
    if (!m.store_.contains(name)) throw FormatError("checkpoint: unexpected parameter '" + name + "'");
    auto& dst = m.store_.at(name);
    Tensor2 v = c.tensor("param/" + name);
    if (v.rows() != dst.value.rows() || v.cols() != dst.value.cols())
      throw FormatError("checkpoint: shape mismatch for '" + name + "'");
    dst.value = std::move(v);
  }
  for (const auto& g : c.header().at("frozen_groups")) m.store_.set_frozen(g.get<std::string>(), true);
  return m;
}

// ---- phoneme encoder ----

PhonemeEncoding phn_encode(const SynthModel& m, int language, std::span<const int> phonemes,
                           const Tensor2* table) {
  if (phonemes.empty()) throw ArgumentError("phn_encode: empty phoneme sequence");
  const Tensor2& emb = table ? *table : m.embedding(language);
  const int first = language * kPhonemeIdStride;
  PhonemeEncoding enc;
  enc.language = language;
  Tensor2 x(phonemes.size(), static_cast<std::size_t>(m.config().hidden));
  for (std::size_t i = 0; i < phonemes.size(); ++i) {
    const int local = phonemes[i] - first;
    if (local < 0 || static_cast<std::size_t>(local) >= emb.rows()) {
      throw VocabularyError("phn_encode: phoneme id " + std::to_string(phonemes[i]) +
                            " is not in the table of language " + std::to_string(language));
    }
    enc.local_ids.push_back(local);
    auto src = emb.row(static_cast<std::size_t>(local));
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }
  add_positions(x, m.config());
  enc.output = run_blocks(m.params(), m.index().phoneme, std::move(x), &enc.blocks);
  return enc;
}

void phn_encode_backward(SynthModel& m, const PhonemeEncoding& enc, const Tensor2& d_out,
                         Tensor2* table_grad) {
  Tensor2 dx = run_blocks_backward(m.params(), m.index().phoneme, enc.blocks, d_out);
  Tensor2& g = table_grad ? *table_grad : m.params().at("emb/" + std::to_string(enc.language)).grad;
  for (std::size_t i = 0; i < enc.local_ids.size(); ++i) {
    auto dst = g.row(static_cast<std::size_t>(enc.local_ids[i]));
    auto src = dx.row(i);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
  }
}

// ---- representation encoder ----

RepresentationEncoding rep_encode(const SynthModel& m, const LayeredFeatures& feats,
                                  std::span<const std::size_t> boundaries) {
  const auto& cfg = m.config();
  if (feats.layers.size() != static_cast<std::size_t>(cfg.ssl_layers) ||
      feats.dim() != static_cast<std::size_t>(cfg.ssl_dim)) {
    throw DimensionError("rep_encode: expected " + std::to_string(cfg.ssl_layers) + " layers of width " +
                         std::to_string(cfg.ssl_dim));
  }
  if (boundaries.empty() || boundaries.back() != feats.frame_count()) {
    throw AlignmentError("rep_encode: boundaries end at " +
                         std::to_string(boundaries.empty() ? 0 : boundaries.back()) + " but features have " +
                         std::to_string(feats.frame_count()) + " frames");
  }
  const auto& s = m.params();
  RepresentationEncoding enc;
  enc.features = &feats;
  enc.boundaries.assign(boundaries.begin(), boundaries.end());
  enc.weights = softmax(s[m.index().rep_weights.W].value.values());
  enc.mixed = Tensor2(feats.frame_count(), feats.dim());
  auto mixed = enc.mixed.values();
  for (std::size_t k = 0; k < feats.layers.size(); ++k) {
    const double a = enc.weights[k];
    auto lv = feats.layers[k].values();
    for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] += a * lv[i];
  }
  enc.projected = affine_forward(enc.mixed, s[m.index().rep_in.W].value, s[m.index().rep_in.b].value);
  enc.frame_output = run_blocks(s, m.index().representation, enc.projected, &enc.blocks);
  enc.output = segment_mean(enc.frame_output, enc.boundaries);
  return enc;
}

void rep_encode_backward(SynthModel& m, const RepresentationEncoding& enc, const Tensor2& d_out) {
  auto& s = m.params();
  Tensor2 d_frames = segment_mean_backward(d_out, enc.boundaries, enc.frame_output.rows());
  Tensor2 d_proj = run_blocks_backward(s, m.index().representation, enc.blocks, d_frames);
  Tensor2 d_mixed;
  auto& W = s[m.index().rep_in.W];
  auto& b = s[m.index().rep_in.b];
  affine_backward(enc.mixed, W.value, d_proj, &d_mixed, W.grad, b.grad.values());
  auto& lw = s[m.index().rep_weights.W];
  const auto dm = d_mixed.values();
  const auto mv = enc.mixed.values();
  for (std::size_t j = 0; j < enc.weights.size(); ++j) {
    const auto fj = enc.features->layers[j].values();
    double acc = 0.0;
    for (std::size_t i = 0; i < dm.size(); ++i) acc += dm[i] * (fj[i] - mv[i]);
    lw.grad(0, j) += enc.weights[j] * acc;
  }
}

// ---- shared encoder, duration head, decoder ----

SynthesisPass synthesize(const SynthModel& m, const Tensor2& c, std::span<const int> durations) {
  const auto& s = m.params();
  const auto& ix = m.index();
  if (c.cols() != static_cast<std::size_t>(m.config().hidden))
    throw DimensionError("synthesize: input width " + std::to_string(c.cols()));
  if (durations.size() != c.rows()) {
    throw DimensionError("synthesize: " + std::to_string(durations.size()) + " durations for " +
                         std::to_string(c.rows()) + " phonemes");
  }
  for (int d : durations)
    if (d <= 0) throw DurationError("synthesize: durations must be positive, got " + std::to_string(d));
  SynthesisPass pass;
  pass.durations.assign(durations.begin(), durations.end());
  pass.shared_out = run_blocks(s, ix.shared, c, &pass.shared_blocks);
  pass.log_duration = affine_forward(pass.shared_out, s[ix.duration.W].value, s[ix.duration.b].value);
  pass.upsampled = upsample(pass.shared_out, durations);
  add_positions(pass.upsampled, m.config());
  pass.decoder_out = run_blocks(s, ix.decoder, pass.upsampled, &pass.decoder_blocks);
  pass.frames = affine_forward(pass.decoder_out, s[ix.output.W].value, s[ix.output.b].value);
  return pass;
}

Tensor2 synthesize_backward(SynthModel& m, const SynthesisPass& pass, const Tensor2& d_frames,
                            const Tensor2& d_log_duration) {
  auto& s = m.params();
  const auto& ix = m.index();
  Tensor2 d_dec;
  affine_backward(pass.decoder_out, s[ix.output.W].value, d_frames, &d_dec, s[ix.output.W].grad,
                  s[ix.output.b].grad.values());
  Tensor2 d_up = run_blocks_backward(s, ix.decoder, pass.decoder_blocks, d_dec);
  Tensor2 d_shared = upsample_backward(d_up, pass.durations);
  Tensor2 d_from_dur;
  affine_backward(pass.shared_out, s[ix.duration.W].value, d_log_duration, &d_from_dur,
                  s[ix.duration.W].grad, s[ix.duration.b].grad.values());
  add_inplace(d_shared, d_from_dur);
  return run_blocks_backward(s, ix.shared, pass.shared_blocks, d_shared);
}

Tensor2 predict_log_durations(const SynthModel& m, const Tensor2& c) {
  const auto& s = m.params();
  const auto& ix = m.index();
  Tensor2 z = run_blocks(s, ix.shared, c, nullptr);
  return affine_forward(z, s[ix.duration.W].value, s[ix.duration.b].value);
}

std::vector<int> predict_durations(const SynthModel& m, const Tensor2& c) {
  Tensor2 raw = predict_log_durations(m, c);
  std::vector<int> out;
  out.reserve(raw.rows());
  for (std::size_t i = 0; i < raw.rows(); ++i) {
    const double v = std::round(std::exp(std::min(raw(i, 0), 10.0)));
    out.push_back(std::max(1, static_cast<int>(v)));
  }
  return out;
}

Tensor2 infer_frames(const SynthModel& m, const Tensor2& c) {
  return synthesize(m, c, predict_durations(m, c)).frames;
}

// ---- loss ----

Tensor2 mix_rows(const Tensor2& c_phn, const Tensor2& c_repr, std::span<const Source> plan) {
  if (c_phn.rows() != c_repr.rows() || c_phn.cols() != c_repr.cols() || plan.size() != c_phn.rows()) {
    throw AlignmentError("mix: c_phn " + c_phn.shape_str() + ", c_repr " + c_repr.shape_str() +
                         ", plan of length " + std::to_string(plan.size()));
  }
  Tensor2 out = c_phn;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    if (plan[i] == Source::FromRepr) {
      auto src = c_repr.row(i);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
  }
  return out;
}

LossTerms forward_loss(SynthModel& m, const Example& ex, const Normalizers& norm, bool backward) {
  if (ex.target == nullptr) throw InputError("forward_loss: missing target frames");
  const std::size_t L = ex.durations.size();
  if (L == 0) throw InputError("forward_loss: empty example");

  const Source uniform_source = ex.branch == Branch::Phoneme ? Source::FromPhn : Source::FromRepr;
  if (!ex.choice.empty() && ex.choice.size() != L)
    throw AlignmentError("forward_loss: choice length does not match phoneme count");
  auto source_of = [&](std::size_t i) { return ex.choice.empty() ? uniform_source : ex.choice[i]; };
  bool need_phn = false, need_repr = false;
  for (std::size_t i = 0; i < L; ++i) (source_of(i) == Source::FromPhn ? need_phn : need_repr) = true;

  if (need_phn && ex.phonemes.size() != L)
    throw InputError("forward_loss: phoneme branch needs a transcript matching the durations");
  if (need_repr && ex.features == nullptr && ex.fixed_repr == nullptr)
    throw InputError("forward_loss: representation branch needs features and boundaries");

  std::optional<PhonemeEncoding> phn;
  std::optional<RepresentationEncoding> rep;
  const Tensor2* c_repr = ex.fixed_repr;
  if (need_phn) phn = phn_encode(m, ex.language, ex.phonemes, ex.table);
  if (need_repr && c_repr == nullptr) {
    const auto bounds = boundaries_from_durations(ex.durations);
    rep = rep_encode(m, *ex.features, bounds);
    c_repr = &rep->output;
  }
  if (c_repr != nullptr && c_repr->rows() != L)
    throw AlignmentError("forward_loss: c_repr has " + std::to_string(c_repr->rows()) + " rows for " +
                         std::to_string(L) + " phonemes");

  Tensor2 c;
  if (need_phn && need_repr) {
    std::vector<Source> plan(L);
    for (std::size_t i = 0; i < L; ++i) plan[i] = source_of(i);
    c = mix_rows(phn->output, *c_repr, plan);
  } else {
    c = need_phn ? phn->output : *c_repr;
  }

  SynthesisPass pass = synthesize(m, c, ex.durations);
  std::vector<double> ones_f, ones_d;
  auto frame_mask = ex.frame_mask;
  auto dur_mask = ex.duration_mask;
  if (frame_mask.empty()) {
    ones_f.assign(pass.frames.rows(), 1.0);
    frame_mask = ones_f;
  }
  if (dur_mask.empty()) {
    ones_d.assign(L, 1.0);
    dur_mask = ones_d;
  }
  const LossGrad fl = masked_mse(pass.frames, *ex.target, frame_mask, norm.frame);
  const LossGrad dl = duration_loss(pass.log_duration, ex.durations, dur_mask, norm.duration);
  LossTerms terms{fl.value, dl.value};
  if (!std::isfinite(terms.total())) throw NumericError("forward_loss: non-finite loss");
  if (!backward) return terms;

  Tensor2 d_c = synthesize_backward(m, pass, fl.grad, dl.grad);
  if (need_phn) {
    Tensor2 d_phn = d_c;
    if (need_repr)
      for (std::size_t i = 0; i < L; ++i)
        if (source_of(i) == Source::FromRepr) std::fill(d_phn.row(i).begin(), d_phn.row(i).end(), 0.0);
    phn_encode_backward(m, *phn, d_phn, ex.table_grad);
  }
  if (rep) {
    Tensor2 d_rep = d_c;
    if (need_phn)
      for (std::size_t i = 0; i < L; ++i)
        if (source_of(i) == Source::FromPhn) std::fill(d_rep.row(i).begin(), d_rep.row(i).end(), 0.0);
    rep_encode_backward(m, *rep, d_rep);
  }
  return terms;
}

}  // namespace plmix
