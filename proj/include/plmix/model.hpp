#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plmix/corpus.hpp"
#include "plmix/params.hpp"
#include "plmix/tensor.hpp"

namespace plmix {

namespace group {
inline const std::string kPhonemeEncoder = "phoneme_encoder";
inline const std::string kRepresentationEncoder = "representation_encoder";
inline const std::string kSharedEncoder = "shared_encoder";
inline const std::string kDurationPredictor = "duration_predictor";
inline const std::string kDecoder = "decoder";
inline const std::string kGenerator = "embedding_generator";
/// Each language's embedding table is its own group: "embedding/<lang>".
std::string embedding(int language);
}  // namespace group

struct ModelConfig {
  int hidden = 32;
  int frame_dim = 16;
  int ssl_dim = 24;
  int ssl_layers = 4;
  int phoneme_blocks = 2;
  int representation_blocks = 2;
  int shared_blocks = 2;
  int decoder_blocks = 2;
  /// Sinusoidal position features on phoneme-encoder input and decoder input.
  bool position_features = true;
  double position_scale = 1.0;
};

nlohmann::json to_json(const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Which encoder feeds the shared encoder for a phoneme.
enum class Source : std::uint8_t { FromPhn = 0, FromRepr = 1 };
enum class Branch { Phoneme, Representation };

class SynthModel {
 public:
  SynthModel(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  /// Adds (or re-initializes) a randomly initialized embedding table for a language.
  void init_embedding(int language, int inventory, Rng& rng);
  void set_embedding(int language, Tensor2 table);
  bool has_language(int language) const;
  const Tensor2& embedding(int language) const;
  int inventory(int language) const;
  std::vector<int> languages() const;

  /// Free-form provenance (for example the branch probability used in pretraining).
  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

  /// Branch probability recorded by pretraining, or nullopt if never pretrained.
  std::optional<double> pretrained_p_repr() const;

  // Stable parameter indices for the fixed layers.
  struct Layer {
    std::size_t W, b;
  };
  struct Index {
    std::vector<Layer> phoneme, representation, shared, decoder;
    Layer rep_in, rep_weights, duration, output, generator;
  };
  const Index& index() const { return idx_; }

  void save(const std::filesystem::path& path) const;
  static SynthModel load(const std::filesystem::path& path);

 private:
  ModelConfig cfg_;
  ParamStore store_;
  Index idx_;
  std::map<int, std::size_t> tables_;
  nlohmann::json metadata_ = nlohmann::json::object();
};

// ---- forward / backward pieces ----

struct PhonemeEncoding {
  Tensor2 output;  // L × h
  int language = 0;
  std::vector<int> local_ids;
  std::vector<BlockCache> blocks;
};

/// c_phn. `table` overrides the model's table for the language (used by the generator).
PhonemeEncoding phn_encode(const SynthModel& m, int language, std::span<const int> phonemes,
                           const Tensor2* table = nullptr);
/// Accumulates block gradients into the model and table gradients into `table_grad`
/// (defaults to the language table's gradient).
void phn_encode_backward(SynthModel& m, const PhonemeEncoding& enc, const Tensor2& d_out,
                         Tensor2* table_grad = nullptr);

struct RepresentationEncoding {
  Tensor2 output;        // L × h, per-segment means
  Tensor2 frame_output;  // T × h, before averaging
  std::vector<double> weights;  // softmax of layer weights
  Tensor2 mixed;                // T × d_ssl
  Tensor2 projected;            // T × h
  std::vector<BlockCache> blocks;
  std::vector<std::size_t> boundaries;
  const LayeredFeatures* features = nullptr;
};

/// c_repr: softmax-weighted layer sum → input projection → blocks → per-segment mean.
RepresentationEncoding rep_encode(const SynthModel& m, const LayeredFeatures& feats,
                                  std::span<const std::size_t> boundaries);
void rep_encode_backward(SynthModel& m, const RepresentationEncoding& enc, const Tensor2& d_out);

struct SynthesisPass {
  std::vector<BlockCache> shared_blocks;
  Tensor2 shared_out;  // L × h
  Tensor2 log_duration;  // L × 1
  std::vector<int> durations;
  Tensor2 upsampled;     // T × h (after position features)
  std::vector<BlockCache> decoder_blocks;
  Tensor2 decoder_out;   // T × h
  Tensor2 frames;        // T × d
};

/// Shared encoder → duration head, and upsampling by `durations` → decoder → projection.
SynthesisPass synthesize(const SynthModel& m, const Tensor2& c, std::span<const int> durations);
/// Returns d c given gradients on predicted frames and log durations.
Tensor2 synthesize_backward(SynthModel& m, const SynthesisPass& pass, const Tensor2& d_frames,
                            const Tensor2& d_log_duration);

/// Raw log-duration head output for shared-encoder input c.
Tensor2 predict_log_durations(const SynthModel& m, const Tensor2& c);
/// round(exp(head)), clamped to >= 1.
std::vector<int> predict_durations(const SynthModel& m, const Tensor2& c);
/// Inference: predicted durations, then frames.
Tensor2 infer_frames(const SynthModel& m, const Tensor2& c);

// ---- losses ----

struct Normalizers {
  double frame = 0.0;     // 0 → this example's kept frames × frame dim
  double duration = 0.0;  // 0 → this example's kept phonemes
};

struct LossTerms {
  double frame = 0.0;
  double duration = 0.0;
  double total() const { return frame + duration; }
};

/// One training example. Either the phoneme branch (transcript) or the representation
/// branch (features) feeds the shared encoder, or a per-phoneme `choice` mixes the two.
struct Example {
  int language = 0;
  std::span<const int> phonemes;
  std::span<const int> durations;
  const Tensor2* target = nullptr;
  /// Features for a trainable representation encoder pass.
  const LayeredFeatures* features = nullptr;
  /// Precomputed (frozen) c_repr; used instead of `features` when set.
  const Tensor2* fixed_repr = nullptr;
  Branch branch = Branch::Phoneme;
  std::span<const Source> choice;        // empty → everything from `branch`
  std::span<const double> frame_mask;    // empty → all ones
  std::span<const double> duration_mask; // empty → all ones
  const Tensor2* table = nullptr;        // embedding override
  Tensor2* table_grad = nullptr;         // gradient sink for the override
};

/// Masked frame MSE + masked log-duration loss; with `backward` the gradients are added to
/// the model's accumulators. Only the encoder(s) that produced c receive gradient.
LossTerms forward_loss(SynthModel& m, const Example& ex, const Normalizers& norm = {},
                       bool backward = true);

/// Replaces rows of c_phn with c_repr where plan says FromRepr.
Tensor2 mix_rows(const Tensor2& c_phn, const Tensor2& c_repr, std::span<const Source> plan);

}  // namespace plmix
