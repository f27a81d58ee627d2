#pragma once

#include <span>
#include <vector>

#include "plmix/corpus.hpp"
#include "plmix/model.hpp"
#include "plmix/pseudolabel.hpp"

namespace plmix {

/// Levenshtein distance with unit costs.
std::size_t edit_distance(std::span<const int> hyp, std::span<const int> ref);

/// Phoneme error rate: edit distance / reference length. Throws MetricError on an empty reference.
double per(std::span<const int> hyp, std::span<const int> ref);

/// Nearest prototype per frame, then consecutive duplicates merged.
std::vector<int> decode_oracle(const Tensor2& frames, const ToyLanguage& lang);

struct PerTally {
  std::size_t edits = 0;
  std::size_t reference = 0;
  void add(std::span<const int> hyp, std::span<const int> ref);
  double rate() const;
};

/// Synthesizes every eval transcript with predicted durations and scores the oracle decode.
double evaluate_per(const SynthModel& m, const ToyLanguage& lang, std::span<const Utterance> eval);

/// PER of pseudo transcripts against the withheld true transcripts.
double pseudo_label_per(std::span<const PseudoUtterance> pseudo, const WithheldTranscripts& truth);

}  // namespace plmix
