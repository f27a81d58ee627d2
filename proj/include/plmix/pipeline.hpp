#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plmix/corpus.hpp"
#include "plmix/model.hpp"
#include "plmix/params.hpp"
#include "plmix/pseudolabel.hpp"
#include "plmix/strategy.hpp"

namespace plmix {

struct PretrainConfig {
  /// Probability that a sample trains through the representation branch; 0 is the
  /// phoneme-only baseline.
  double p_repr = 0.5;
  int steps = 2500;
  int batch = 8;
  AdamConfig adam{.lr = 3e-3};
  std::uint64_t seed = 1;
};

struct StageStats {
  int phoneme_samples = 0;
  int representation_samples = 0;
  double final_loss = 0.0;
  std::vector<double> loss_curve;  // one mean loss per logging window
  std::vector<std::string> warnings;
};

/// Joint pretraining on D_source. Embedding tables for the source languages are created
/// when missing. Records the branch probability in the model metadata.
StageStats mix_pretrain(SynthModel& m, std::span<const Utterance> source,
                        std::span<const ToyLanguage> languages, const SslSimulator& ssl,
                        const PretrainConfig& cfg);

struct GeneratorConfig {
  int steps = 150;
  int batch = 8;
  int support = 4;  // utterances per batch that build the table; the rest are the query
  int max_retries = 50;
  AdamConfig adam{.lr = 3e-3};
  std::uint64_t seed = 2;
};

/// Second pretraining stage: only the generator projection is updated.
StageStats train_embedding_generator(SynthModel& m, std::span<const Utterance> source,
                                     std::span<const ToyLanguage> languages, const SslSimulator& ssl,
                                     const GeneratorConfig& cfg);

/// Per phoneme: mean over its segments of the segment-mean representation. Rows of
/// phonemes that never occur are left at zero and reported through `covered`.
Tensor2 double_average(const SynthModel& m, int inventory, int language, std::span<const Utterance> labeled,
                       std::span<const LayeredFeatures> features, std::vector<bool>* covered = nullptr);

/// double_average followed by the generator projection. Throws CoverageError naming
/// every phoneme missing from the labeled set.
Tensor2 generate_table(const SynthModel& m, const ToyLanguage& target, std::span<const Utterance> labeled,
                       std::span<const LayeredFeatures> features);

/// Groups updated during fine-tuning; everything else is frozen.
std::vector<std::string> finetune_groups(int target_language);

struct FinetuneConfig {
  MixStrategy strategy;
  int steps = 400;
  int batch = 8;
  AdamConfig adam{.lr = 3e-3};
  std::uint64_t seed = 3;
  /// Initialize the target table with the embedding generator instead of randomly.
  bool generator_init = false;
};

struct FinetuneData {
  const ToyLanguage* target = nullptr;
  std::span<const Utterance> labeled;
  std::span<const PseudoUtterance> pseudo;
  std::span<const UnpairedUtterance> speech;  // aligned with `pseudo`
  const SslSimulator* ssl = nullptr;
};

struct FinetuneStats {
  double threshold = 0.0;
  double kept_ratio = 1.0;
  std::size_t items = 0;
  bool freeze_ok = true;
  double final_loss = 0.0;
  std::vector<double> loss_curve;
};

/// Fine-tunes in place. Throws ConfigError for mixing strategies on a checkpoint that was
/// pretrained without the representation branch, TrainingError when nothing is left to train on.
FinetuneStats finetune(SynthModel& m, const FinetuneData& data, FinetuneConfig cfg);

nlohmann::json to_json(const PretrainConfig& c);
nlohmann::json to_json(const GeneratorConfig& c);
nlohmann::json to_json(const FinetuneConfig& c);
nlohmann::json to_json(const AdamConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);
void from_json(const nlohmann::json& j, FinetuneConfig& c);
void from_json(const nlohmann::json& j, AdamConfig& c);
void from_json(const nlohmann::json& j, MixStrategy& s);
nlohmann::json to_json(const MixStrategy& s);

}  // namespace plmix
