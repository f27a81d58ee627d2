#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "plmix/corpus.hpp"
#include "plmix/params.hpp"

namespace plmix {

/// Linear probe on a learned softmax-weighted sum of the SSL layers.
struct FrameClassifier {
  int language = 0;
  int inventory = 0;
  ParamStore params;  // "layer_weights" (1×K), "W" (d_ssl×P), "b" (1×P)

  static FrameClassifier zeros(int language, int inventory, int layers, int dim);
  /// T × P logits.
  Tensor2 logits(const LayeredFeatures& feats) const;
};

struct ClassifierConfig {
  int steps = 300;
  double lr = 0.05;
};

nlohmann::json to_json(const ClassifierConfig& c);
void from_json(const nlohmann::json& j, ClassifierConfig& c);

/// Full-batch cross-entropy training on every frame of the labeled utterances, with frame
/// targets taken from their known boundaries. The SSL transforms are not touched.
FrameClassifier train_frame_classifier(const ToyLanguage& lang, std::span<const Utterance> labeled,
                                       std::span<const LayeredFeatures> features,
                                       const ClassifierConfig& cfg, std::uint64_t seed);

struct PhonemeRun {
  int phoneme = 0;
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  double confidence = 0.0;

  std::size_t length() const { return end - start; }
  friend bool operator==(const PhonemeRun&, const PhonemeRun&) = default;
};

/// Maximal runs of equal ids; run confidence is the mean of its frames' confidences.
std::vector<PhonemeRun> merge_consecutive(std::span<const int> ids, std::span<const double> confidences);
/// Frame ids back from runs.
std::vector<int> expand_runs(std::span<const PhonemeRun> runs);

struct FramePrediction {
  std::vector<int> ids;  // global phoneme ids
  std::vector<double> confidences;
};
FramePrediction predict_frames(const FrameClassifier& clf, const LayeredFeatures& feats);

struct PseudoUtterance {
  std::uint64_t id = 0;
  int language = 0;
  std::vector<PhonemeRun> runs;

  std::vector<int> phonemes() const;
  std::vector<int> durations() const;
  std::vector<double> confidences() const;
  double sentence_confidence() const;
  std::size_t frame_count() const { return runs.empty() ? 0 : runs.back().end; }
  friend bool operator==(const PseudoUtterance&, const PseudoUtterance&) = default;
};

PseudoUtterance pseudo_label(const FrameClassifier& clf, const LayeredFeatures& feats, std::uint64_t id);
std::vector<PseudoUtterance> pseudo_label(const FrameClassifier& clf, std::span<const UnpairedUtterance> speech,
                                          const SslSimulator& ssl);

void save_pseudo_corpus(const std::vector<PseudoUtterance>& corpus, const std::filesystem::path& path);
std::vector<PseudoUtterance> load_pseudo_corpus(const std::filesystem::path& path);

void save_classifier(const FrameClassifier& clf, const std::filesystem::path& path);
FrameClassifier load_classifier(const std::filesystem::path& path);

}  // namespace plmix
