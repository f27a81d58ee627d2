#include "plmix/pseudolabel.hpp"

#include <algorithm>
#include <numeric>

#include "plmix/container.hpp"
#include "plmix/errors.hpp"
#include "plmix/losses.hpp"

namespace plmix {

namespace {

constexpr const char* kPseudoKind = "pseudo-corpus";
constexpr const char* kClassifierKind = "frame-classifier";

Tensor2 mix_layers(const LayeredFeatures& feats, std::span<const double> weights) {
  Tensor2 mixed(feats.frame_count(), feats.dim());
  auto mv = mixed.values();
  for (std::size_t k = 0; k < feats.layers.size(); ++k) {
    auto lv = feats.layers[k].values();
    for (std::size_t i = 0; i < mv.size(); ++i) mv[i] += weights[k] * lv[i];
  }
  return mixed;
}

}  // namespace

FrameClassifier FrameClassifier::zeros(int language, int inventory, int layers, int dim) {
  FrameClassifier clf;
  clf.language = language;
  clf.inventory = inventory;
  clf.params.add("layer_weights", "classifier", Tensor2(1, static_cast<std::size_t>(layers)));
  clf.params.add("W", "classifier", Tensor2(static_cast<std::size_t>(dim), static_cast<std::size_t>(inventory)));
  clf.params.add("b", "classifier", Tensor2(1, static_cast<std::size_t>(inventory)));
  return clf;
}

Tensor2 FrameClassifier::logits(const LayeredFeatures& feats) const {
  const auto& lw = params[0].value;
  if (feats.layers.size() != lw.cols() || feats.dim() != params[1].value.rows()) {
    throw DimensionError("FrameClassifier: expected " + std::to_string(lw.cols()) + " layers of width " +
                         std::to_string(params[1].value.rows()));
  }
  const auto weights = softmax(lw.values());
  return affine_forward(mix_layers(feats, weights), params[1].value, params[2].value);
}

nlohmann::json to_json(const ClassifierConfig& c) { return {{"steps", c.steps}, {"lr", c.lr}}; }

void from_json(const nlohmann::json& j, ClassifierConfig& c) {
  if (j.contains("steps")) j.at("steps").get_to(c.steps);
  if (j.contains("lr")) j.at("lr").get_to(c.lr);
}

FrameClassifier train_frame_classifier(const ToyLanguage& lang, std::span<const Utterance> labeled,
                                       std::span<const LayeredFeatures> features,
                                       const ClassifierConfig& cfg, std::uint64_t seed) {
  if (labeled.empty()) throw TrainingError("train_frame_classifier: no labeled utterances");
  if (labeled.size() != features.size())
    throw DimensionError("train_frame_classifier: one feature stack per utterance is required");
  const std::size_t layers = features.front().layers.size();
  const std::size_t dim = features.front().dim();

  // Stack all frames into one design matrix per layer.
  std::size_t total = 0;
  for (std::size_t u = 0; u < labeled.size(); ++u) {
    if (features[u].frame_count() != labeled[u].frame_count())
      throw AlignmentError("train_frame_classifier: features and frames disagree in length");
    total += labeled[u].frame_count();
  }
  LayeredFeatures stacked;
  for (std::size_t k = 0; k < layers; ++k) stacked.layers.emplace_back(total, dim);
  std::vector<int> targets;
  targets.reserve(total);
  std::size_t row = 0;
  for (std::size_t u = 0; u < labeled.size(); ++u) {
    const auto& utt = labeled[u];
    for (std::size_t i = 0; i < utt.length(); ++i)
      for (int r = 0; r < utt.durations[i]; ++r) targets.push_back(lang.local_id(utt.phonemes[i]));
    for (std::size_t t = 0; t < utt.frame_count(); ++t, ++row)
      for (std::size_t k = 0; k < layers; ++k) {
        auto src = features[u].layers[k].row(t);
        std::copy(src.begin(), src.end(), stacked.layers[k].row(row).begin());
      }
  }

  FrameClassifier clf = FrameClassifier::zeros(lang.index, lang.inventory_size(), static_cast<int>(layers),
                                               static_cast<int>(dim));
  Rng rng(derive_seed(seed, {0x636c66ULL}));
  clf.params.replace(1, uniform_init(dim, static_cast<std::size_t>(lang.inventory_size()), dim, rng));

  AdamConfig ac;
  ac.lr = cfg.lr;
  Adam opt(ac);
  for (int step = 0; step < cfg.steps; ++step) {
    clf.params.zero_grad();
    const auto weights = softmax(clf.params[0].value.values());
    const Tensor2 mixed = mix_layers(stacked, weights);
    const Tensor2 logits = affine_forward(mixed, clf.params[1].value, clf.params[2].value);
    const LossGrad ce = cross_entropy(logits, targets);
    Tensor2 d_mixed;
    affine_backward(mixed, clf.params[1].value, ce.grad, &d_mixed, clf.params[1].grad,
                    clf.params[2].grad.values());
    const auto dm = d_mixed.values();
    const auto mv = mixed.values();
    for (std::size_t j = 0; j < layers; ++j) {
      const auto fj = stacked.layers[j].values();
      double acc = 0.0;
      for (std::size_t i = 0; i < dm.size(); ++i) acc += dm[i] * (fj[i] - mv[i]);
      clf.params[0].grad(0, j) = weights[j] * acc;
    }
    opt.step(clf.params);
  }
  return clf;
}

std::vector<PhonemeRun> merge_consecutive(std::span<const int> ids, std::span<const double> confidences) {
  if (ids.empty()) throw ArgumentError("merge_consecutive: no frames");
  if (ids.size() != confidences.size())
    throw AlignmentError("merge_consecutive: " + std::to_string(ids.size()) + " ids but " +
                         std::to_string(confidences.size()) + " confidences");
  std::vector<PhonemeRun> runs;
  std::size_t start = 0;
  double sum = 0.0;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    sum += confidences[t];
    if (t + 1 == ids.size() || ids[t + 1] != ids[t]) {
      runs.push_back({ids[t], start, t + 1, sum / static_cast<double>(t + 1 - start)});
      start = t + 1;
      sum = 0.0;
    }
  }
  return runs;
}

std::vector<int> expand_runs(std::span<const PhonemeRun> runs) {
  std::vector<int> out;
  for (const auto& r : runs) out.insert(out.end(), r.length(), r.phoneme);
  return out;
}

FramePrediction predict_frames(const FrameClassifier& clf, const LayeredFeatures& feats) {
  const Tensor2 logits = clf.logits(feats);
  FramePrediction out;
  const int first = clf.language * kPhonemeIdStride;
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    const auto p = softmax(logits.row(t));
    const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    out.ids.push_back(first + static_cast<int>(best));
    out.confidences.push_back(p[best]);
  }
  return out;
}

std::vector<int> PseudoUtterance::phonemes() const {
  std::vector<int> out;
  for (const auto& r : runs) out.push_back(r.phoneme);
  return out;
}

std::vector<int> PseudoUtterance::durations() const {
  std::vector<int> out;
  for (const auto& r : runs) out.push_back(static_cast<int>(r.length()));
  return out;
}

std::vector<double> PseudoUtterance::confidences() const {
  std::vector<double> out;
  for (const auto& r : runs) out.push_back(r.confidence);
  return out;
}

double PseudoUtterance::sentence_confidence() const {
  if (runs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : runs) s += r.confidence;
  return s / static_cast<double>(runs.size());
}

PseudoUtterance pseudo_label(const FrameClassifier& clf, const LayeredFeatures& feats, std::uint64_t id) {
  const auto pred = predict_frames(clf, feats);
  return PseudoUtterance{id, clf.language, merge_consecutive(pred.ids, pred.confidences)};
}

std::vector<PseudoUtterance> pseudo_label(const FrameClassifier& clf, std::span<const UnpairedUtterance> speech,
                                          const SslSimulator& ssl) {
  std::vector<PseudoUtterance> out;
  out.reserve(speech.size());
  for (const auto& u : speech) out.push_back(pseudo_label(clf, ssl.features(u.frames, u.id), u.id));
  return out;
}

void save_pseudo_corpus(const std::vector<PseudoUtterance>& corpus, const std::filesystem::path& path) {
  Container c(kPseudoKind);
  c.header()["format_version"] = Container::kFormatVersion;
  c.header()["count"] = corpus.size();
  std::vector<std::uint64_t> ids;
  std::vector<int> languages, counts, phonemes, starts, ends;
  std::vector<double> confidences;
  for (const auto& u : corpus) {
    ids.push_back(u.id);
    languages.push_back(u.language);
    counts.push_back(static_cast<int>(u.runs.size()));
    for (const auto& r : u.runs) {
      phonemes.push_back(r.phoneme);
      starts.push_back(static_cast<int>(r.start));
      ends.push_back(static_cast<int>(r.end));
      confidences.push_back(r.confidence);
    }
  }
  c.put_u64("ids", ids);
  c.put_ints("languages", languages);
  c.put_ints("run_counts", counts);
  c.put_ints("phonemes", phonemes);
  c.put_ints("starts", starts);
  c.put_ints("ends", ends);
  c.put("confidences", Tensor2::row_vector(confidences));
  c.save(path);
}

std::vector<PseudoUtterance> load_pseudo_corpus(const std::filesystem::path& path) {
  const auto c = Container::load(path, kPseudoKind);
  const auto ids = c.u64s("ids");
  const auto languages = c.ints("languages");
  const auto counts = c.ints("run_counts");
  const auto phonemes = c.ints("phonemes");
  const auto starts = c.ints("starts");
  const auto ends = c.ints("ends");
  const auto conf = c.tensor("confidences");
  const auto total = static_cast<std::size_t>(std::accumulate(counts.begin(), counts.end(), 0LL));
  if (languages.size() != ids.size() || counts.size() != ids.size() || phonemes.size() != total ||
      starts.size() != total || ends.size() != total || conf.size() != total) {
    throw FormatError("'" + path.string() + "': inconsistent pseudo corpus arrays");
  }
  std::vector<PseudoUtterance> out;
  std::size_t k = 0;
  for (std::size_t u = 0; u < ids.size(); ++u) {
    PseudoUtterance p{ids[u], languages[u], {}};
    for (int r = 0; r < counts[u]; ++r, ++k)
      p.runs.push_back({phonemes[k], static_cast<std::size_t>(starts[k]), static_cast<std::size_t>(ends[k]),
                        conf.values()[k]});
    out.push_back(std::move(p));
  }
  return out;
}

void save_classifier(const FrameClassifier& clf, const std::filesystem::path& path) {
  Container c(kClassifierKind);
  c.header()["format_version"] = Container::kFormatVersion;
  c.header()["language"] = clf.language;
  c.header()["inventory"] = clf.inventory;
  for (const auto& p : clf.params.all()) c.put(p.name, p.value);
  c.save(path);
}

FrameClassifier load_classifier(const std::filesystem::path& path) {
  const auto c = Container::load(path, kClassifierKind);
  const Tensor2 lw = c.tensor("layer_weights");
  const Tensor2 W = c.tensor("W");
  FrameClassifier clf = FrameClassifier::zeros(c.header().at("language").get<int>(),
                                               c.header().at("inventory").get<int>(),
                                               static_cast<int>(lw.cols()), static_cast<int>(W.rows()));
  clf.params.replace(0, lw);
  clf.params.replace(1, W);
  clf.params.replace(2, c.tensor("b"));
  return clf;
}

}  // namespace plmix
