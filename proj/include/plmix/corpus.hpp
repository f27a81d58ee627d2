#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "plmix/tensor.hpp"

namespace plmix {

/// Phoneme ids are global: language l owns [l * kPhonemeIdStride, (l + 1) * kPhonemeIdStride).
inline constexpr int kPhonemeIdStride = 256;

struct LanguageConfig {
  int phonemes = 10;
  int frame_dim = 16;
  double noise = 0.05;
  int min_duration = 2;
  int max_duration = 6;
  /// Lower bound on pairwise prototype distance; the effective bound is max(this, 4·noise).
  double min_separation = 1.0;
  /// Phoneme frequency ∝ 1 / rank^zipf (0 gives a uniform inventory).
  double zipf = 1.0;
  int max_retries = 200;
};

struct ToyLanguage {
  int index = 0;
  Tensor2 prototypes;               // P × d, one row per local phoneme
  std::vector<int> min_duration;    // per phoneme
  std::vector<int> max_duration;    // per phoneme
  std::vector<double> frequency;    // per phoneme, sums to 1
  double noise = 0.0;

  int inventory_size() const { return static_cast<int>(prototypes.rows()); }
  int frame_dim() const { return static_cast<int>(prototypes.cols()); }
  int first_id() const { return index * kPhonemeIdStride; }
  int global_id(int local) const { return first_id() + local; }
  bool owns(int global) const { return global >= first_id() && global < first_id() + inventory_size(); }
  /// Throws VocabularyError for ids outside this language's inventory.
  int local_id(int global) const;
  double min_pairwise_distance() const;
  double mean_duration(int local) const { return 0.5 * (min_duration[local] + max_duration[local]); }

  friend bool operator==(const ToyLanguage&, const ToyLanguage&) = default;
};

ToyLanguage gen_language(std::uint64_t world_seed, int lang_index, const LanguageConfig& cfg);

struct Utterance {
  std::uint64_t id = 0;
  int language = 0;
  std::vector<int> phonemes;  // global ids
  std::vector<int> durations;
  Tensor2 frames;             // Σ durations × d

  std::size_t length() const { return phonemes.size(); }
  std::size_t frame_count() const { return frames.rows(); }
  std::vector<std::size_t> boundaries() const { return boundaries_from_durations(durations); }

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

/// Renders frames for a given transcript: prototype rows repeated per duration plus i.i.d.
/// N(0, noise²) per entry (noise from `seed`).
Utterance render_utterance(const ToyLanguage& lang, std::uint64_t id, std::vector<int> phonemes,
                           std::vector<int> durations, std::uint64_t seed);

/// Samples a transcript (no immediate repeats), durations and frames.
Utterance gen_utterance(const ToyLanguage& lang, std::uint64_t seed, int min_length, int max_length,
                        std::uint64_t id = 0);

struct SslConfig {
  int layers = 4;
  int dim = 24;
  /// Per-frame noise scale; layer k uses noise * layer_noise[k % size].
  double noise = 0.6;
  std::vector<double> layer_noise = {1.6, 1.0, 0.7, 1.3};
  /// AR(1) coefficient of the noise along time; 0 gives i.i.d. frames.
  double temporal_correlation = 0.0;
  /// Utterance-level nuisance (speaker/channel-like) offset: dim and scale.
  int nuisance_dim = 3;
  double nuisance_scale = 0.8;
  /// Scale of the per-layer linear maps A_k.
  double gain = 1.0;
};

struct LayeredFeatures {
  std::vector<Tensor2> layers;  // K matrices, each frames × d_ssl
  std::size_t frame_count() const { return layers.empty() ? 0 : layers.front().rows(); }
  std::size_t dim() const { return layers.empty() ? 0 : layers.front().cols(); }
};

/// Fixed multi-layer feature extractor standing in for a frozen self-supervised model.
/// Layer k = A_k·frame + c_k + B_k·u + noise, where (A_k, c_k, B_k) depend only on the world
/// seed and u is a per-utterance nuisance vector.
class SslSimulator {
 public:
  SslSimulator(std::uint64_t world_seed, int frame_dim, SslConfig cfg);

  LayeredFeatures features(const Tensor2& frames, std::uint64_t utterance_id) const;
  LayeredFeatures features(const Utterance& u) const { return features(u.frames, u.id); }

  const SslConfig& config() const { return cfg_; }
  int frame_dim() const { return frame_dim_; }
  std::uint64_t fingerprint() const;

 private:
  std::uint64_t world_seed_;
  int frame_dim_;
  SslConfig cfg_;
  std::vector<Tensor2> maps_;      // d × d_ssl (applied as frame · A)
  std::vector<Tensor2> offsets_;   // 1 × d_ssl
  std::vector<Tensor2> nuisance_;  // nuisance_dim × d_ssl
};

LayeredFeatures ssl_features(const Utterance& u, std::uint64_t world_seed, const SslConfig& cfg);

struct SplitConfig {
  int n_source_langs = 3;
  int source_utterances = 240;  // per source language
  int n_shots = 16;
  double unlabeled_minutes = 60.0;
  int eval_size = 64;
  int min_length = 6;
  int max_length = 14;
  /// Converts unlabeled minutes into a frame budget.
  double frames_per_second = 10.0;
  int max_resample = 2000;
};

struct UnpairedUtterance {
  std::uint64_t id = 0;
  int language = 0;
  Tensor2 frames;
  friend bool operator==(const UnpairedUtterance&, const UnpairedUtterance&) = default;
};

/// True transcripts of the unpaired set, kept aside for scoring pseudo labels. Training code
/// only ever receives `UnpairedUtterance`, which carries no transcript.
class WithheldTranscripts {
 public:
  void add(const Utterance& u) { store_[u.id] = {u.phonemes, u.durations}; }
  std::span<const int> phonemes(std::uint64_t id) const;
  std::span<const int> durations(std::uint64_t id) const;
  std::size_t size() const { return store_.size(); }
  bool operator==(const WithheldTranscripts&) const = default;

 private:
  struct Entry {
    std::vector<int> phonemes, durations;
    bool operator==(const Entry&) const = default;
  };
  std::map<std::uint64_t, Entry> store_;
};

enum class Partition : std::uint64_t { Source = 1, Target = 2, Unpaired = 3, Eval = 4 };
std::uint64_t make_utterance_id(Partition p, std::uint64_t run_seed, std::uint64_t index);
Partition partition_of(std::uint64_t id);

struct CorpusSplit {
  std::uint64_t world_seed = 0;
  std::uint64_t run_seed = 0;
  SplitConfig config;
  LanguageConfig language_config;
  std::vector<ToyLanguage> source_languages;
  ToyLanguage target_language;
  std::vector<Utterance> source;   // D_source
  std::vector<Utterance> target;   // D_target
  std::vector<UnpairedUtterance> unpaired;  // S^u_target
  std::vector<Utterance> eval;
  WithheldTranscripts withheld;

  std::size_t unpaired_frames() const;
};

/// Source data depends on world_seed only; target partitions also on run_seed. The labeled
/// set is the first window of a seeded candidate stream that covers the full target
/// inventory; the unpaired stream is generated until the frame budget is met, so smaller
/// budgets yield prefixes of larger ones; eval utterances are rejection-resampled until
/// every phoneme they contain occurs in the labeled set.
CorpusSplit make_split(std::uint64_t world_seed, std::uint64_t run_seed, const SplitConfig& cfg,
                       const LanguageConfig& lang_cfg = {});

/// Only the D_source part of a split (cheap to share between runs).
std::vector<Utterance> make_source(std::uint64_t world_seed, const SplitConfig& cfg,
                                   const std::vector<ToyLanguage>& languages);

nlohmann::json to_json(const SplitConfig& c);
nlohmann::json to_json(const LanguageConfig& c);
nlohmann::json to_json(const SslConfig& c);
/// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, SplitConfig& c);
void from_json(const nlohmann::json& j, LanguageConfig& c);
void from_json(const nlohmann::json& j, SslConfig& c);

/// One container file per partition: source, target, unpaired (with withheld transcripts), eval.
void save_split(const CorpusSplit& split, const std::filesystem::path& dir);
CorpusSplit load_split(const std::filesystem::path& dir);

}  // namespace plmix
