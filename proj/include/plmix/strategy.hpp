#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plmix/model.hpp"
#include "plmix/pseudolabel.hpp"
#include "plmix/rng.hpp"

namespace plmix {

enum class StrategyKind { HardPhonemeMix, SentenceMix, SoftMix, Sampling, PhonemeFilter, SentenceFilter };

/// Config names: phoneme_mix, sentence_mix, soft_mix, sampling, phoneme_filter, sentence_filter.
std::string to_string(StrategyKind k);
StrategyKind strategy_kind_from_string(const std::string& s);
/// Short labels used in result tables: PM, SM, SoftMix, Sampling, PF, SF.
std::string short_label(StrategyKind k);

bool is_mixing(StrategyKind k);
bool is_sentence_level(StrategyKind k);
bool uses_threshold(StrategyKind k);

struct MixStrategy {
  StrategyKind kind = StrategyKind::HardPhonemeMix;
  double ratio = 1.0;   // pseudo label ratio r in (0, 1]
  double alpha = 0.9;   // SoftMix only
  double threshold = 0.0;  // λ, filled in by calibration

  void validate() const;
};

struct SelectionPlan {
  std::vector<Source> choice;       // per phoneme
  std::vector<double> keep;         // per phoneme, 0/1
  bool keep_sentence = true;
  std::vector<double> frame_mask;   // per frame, from keep and durations
  std::vector<double> duration_mask;

  std::size_t size() const { return choice.size(); }
  bool all_phoneme() const;
};

/// Largest λ such that the fraction of pool entries ≥ λ is at least r; r = 1 gives 0.
double calibrate_threshold(std::span<const double> confidences, double ratio);

SelectionPlan plan_hard_phoneme_mix(std::span<const double> s, double lambda);
SelectionPlan plan_sentence_mix(std::span<const double> s, double lambda);
SelectionPlan plan_soft_mix(std::span<const double> s, double lambda, double alpha, Rng& rng);
SelectionPlan plan_sampling(std::span<const double> s, Rng& rng);
/// kind must be PhonemeFilter or SentenceFilter. Fills the frame/duration masks.
SelectionPlan plan_filters(std::span<const double> s, double lambda, StrategyKind kind,
                           std::span<const int> durations);

/// Fills frame and duration masks from the per-phoneme keep flags.
void fill_masks(SelectionPlan& plan, std::span<const int> durations);

/// Dispatches on the strategy kind; rng is only drawn from by the stochastic kinds.
SelectionPlan make_plan(const MixStrategy& strategy, std::span<const double> s,
                        std::span<const int> durations, Rng& rng);

/// Row i of the result is c_phn[i] where the plan says FromPhn, else c_repr[i].
Tensor2 apply_plan(const SelectionPlan& plan, const Tensor2& c_phn, const Tensor2& c_repr);

/// Calibrates strategy.threshold on the pool that matches its kind: per-phoneme confidences
/// for phoneme-level kinds, sentence means for sentence-level kinds. Sampling has no λ.
double calibrate(MixStrategy& strategy, std::span<const PseudoUtterance> corpus);

}  // namespace plmix
