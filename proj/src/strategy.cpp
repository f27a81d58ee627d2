#include "plmix/strategy.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "plmix/errors.hpp"

namespace plmix {

namespace {

double mean(std::span<const double> s) {
  double acc = 0.0;
  for (double v : s) acc += v;
  return s.empty() ? 0.0 : acc / static_cast<double>(s.size());
}

SelectionPlan uniform_plan(std::size_t n, Source src) {
  SelectionPlan p;
  p.choice.assign(n, src);
  p.keep.assign(n, 1.0);
  return p;
}

}  // namespace

std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::HardPhonemeMix: return "phoneme_mix";
    case StrategyKind::SentenceMix: return "sentence_mix";
    case StrategyKind::SoftMix: return "soft_mix";
    case StrategyKind::Sampling: return "sampling";
    case StrategyKind::PhonemeFilter: return "phoneme_filter";
    case StrategyKind::SentenceFilter: return "sentence_filter";
  }
  return "?";
}

StrategyKind strategy_kind_from_string(const std::string& s) {
  for (auto k : {StrategyKind::HardPhonemeMix, StrategyKind::SentenceMix, StrategyKind::SoftMix,
                 StrategyKind::Sampling, StrategyKind::PhonemeFilter, StrategyKind::SentenceFilter}) {
    if (to_string(k) == s || short_label(k) == s) return k;
  }
  throw ConfigError("unknown strategy kind '" + s + "'");
}

std::string short_label(StrategyKind k) {
  switch (k) {
    case StrategyKind::HardPhonemeMix: return "PM";
    case StrategyKind::SentenceMix: return "SM";
    case StrategyKind::SoftMix: return "SoftMix";
    case StrategyKind::Sampling: return "Sampling";
    case StrategyKind::PhonemeFilter: return "PF";
    case StrategyKind::SentenceFilter: return "SF";
  }
  return "?";
}

bool is_mixing(StrategyKind k) {
  return k == StrategyKind::HardPhonemeMix || k == StrategyKind::SentenceMix || k == StrategyKind::SoftMix ||
         k == StrategyKind::Sampling;
}

bool is_sentence_level(StrategyKind k) {
  return k == StrategyKind::SentenceMix || k == StrategyKind::SentenceFilter;
}

bool uses_threshold(StrategyKind k) { return k != StrategyKind::Sampling; }

void MixStrategy::validate() const {
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw ConfigError("strategy.ratio must lie in (0, 1], got " + std::to_string(ratio));
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ConfigError("strategy.alpha must lie in [0, 1], got " + std::to_string(alpha));
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw ConfigError("strategy threshold must lie in [0, 1], got " + std::to_string(threshold));
}

bool SelectionPlan::all_phoneme() const {
  return std::all_of(choice.begin(), choice.end(), [](Source s) { return s == Source::FromPhn; });
}

double calibrate_threshold(std::span<const double> confidences, double ratio) {
  if (confidences.empty()) throw CalibrationError("calibrate_threshold: empty confidence pool");
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw CalibrationError("calibrate_threshold: ratio must lie in (0, 1], got " + std::to_string(ratio));
  if (ratio == 1.0) return 0.0;
  std::vector<double> sorted(confidences.begin(), confidences.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double n = static_cast<double>(sorted.size());
  // Smallest k with k / n >= ratio, evaluated the same way the ratio is checked.
  auto k = static_cast<std::size_t>(std::ceil(ratio * n));
  k = std::clamp<std::size_t>(k, 1, sorted.size());
  while (k > 1 && static_cast<double>(k - 1) / n >= ratio) --k;
  while (k < sorted.size() && static_cast<double>(k) / n < ratio) ++k;
  return sorted[k - 1];
}

SelectionPlan plan_hard_phoneme_mix(std::span<const double> s, double lambda) {
  SelectionPlan p = uniform_plan(s.size(), Source::FromPhn);
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i] < lambda) p.choice[i] = Source::FromRepr;
  return p;
}

SelectionPlan plan_sentence_mix(std::span<const double> s, double lambda) {
  if (s.empty()) throw ArgumentError("plan_sentence_mix: empty sentence");
  return uniform_plan(s.size(), mean(s) >= lambda ? Source::FromPhn : Source::FromRepr);
}

SelectionPlan plan_soft_mix(std::span<const double> s, double lambda, double alpha, Rng& rng) {
  SelectionPlan p = uniform_plan(s.size(), Source::FromPhn);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double p_phn = s[i] >= lambda ? alpha : 1.0 - alpha;
    // The draw happens unconditionally so both branches consume the stream identically.
    const double u = rng.uniform();
    if (!(u < p_phn)) p.choice[i] = Source::FromRepr;
  }
  return p;
}

SelectionPlan plan_sampling(std::span<const double> s, Rng& rng) {
  SelectionPlan p = uniform_plan(s.size(), Source::FromPhn);
  for (std::size_t i = 0; i < s.size(); ++i)
    if (!(rng.uniform() < s[i])) p.choice[i] = Source::FromRepr;
  return p;
}

void fill_masks(SelectionPlan& plan, std::span<const int> durations) {
  if (durations.size() != plan.keep.size())
    throw AlignmentError("fill_masks: " + std::to_string(durations.size()) + " durations for a plan of " +
                         std::to_string(plan.keep.size()));
  plan.frame_mask.clear();
  plan.duration_mask.clear();
  for (std::size_t i = 0; i < durations.size(); ++i) {
    const double k = plan.keep_sentence ? plan.keep[i] : 0.0;
    plan.frame_mask.insert(plan.frame_mask.end(), static_cast<std::size_t>(durations[i]), k);
    plan.duration_mask.push_back(k);
  }
}

SelectionPlan plan_filters(std::span<const double> s, double lambda, StrategyKind kind,
                           std::span<const int> durations) {
  SelectionPlan p = uniform_plan(s.size(), Source::FromPhn);
  if (kind == StrategyKind::PhonemeFilter) {
    for (std::size_t i = 0; i < s.size(); ++i) p.keep[i] = s[i] >= lambda ? 1.0 : 0.0;
  } else if (kind == StrategyKind::SentenceFilter) {
    if (s.empty()) throw ArgumentError("plan_filters: empty sentence");
    p.keep_sentence = mean(s) >= lambda;
  } else {
    throw ArgumentError("plan_filters: " + to_string(kind) + " is not a filter");
  }
  fill_masks(p, durations);
  return p;
}

SelectionPlan make_plan(const MixStrategy& strategy, std::span<const double> s, std::span<const int> durations,
                        Rng& rng) {
  SelectionPlan p;
  switch (strategy.kind) {
    case StrategyKind::HardPhonemeMix: p = plan_hard_phoneme_mix(s, strategy.threshold); break;
    case StrategyKind::SentenceMix: p = plan_sentence_mix(s, strategy.threshold); break;
    case StrategyKind::SoftMix: p = plan_soft_mix(s, strategy.threshold, strategy.alpha, rng); break;
    case StrategyKind::Sampling: p = plan_sampling(s, rng); break;
    case StrategyKind::PhonemeFilter:
    case StrategyKind::SentenceFilter: return plan_filters(s, strategy.threshold, strategy.kind, durations);
  }
  fill_masks(p, durations);
  return p;
}

Tensor2 apply_plan(const SelectionPlan& plan, const Tensor2& c_phn, const Tensor2& c_repr) {
  return mix_rows(c_phn, c_repr, plan.choice);
}

double calibrate(MixStrategy& strategy, std::span<const PseudoUtterance> corpus) {
  strategy.validate();
  if (!uses_threshold(strategy.kind)) return strategy.threshold = 0.0;
  std::vector<double> pool;
  for (const auto& u : corpus) {
    if (is_sentence_level(strategy.kind)) {
      pool.push_back(u.sentence_confidence());
    } else {
      for (const auto& r : u.runs) pool.push_back(r.confidence);
    }
  }
  if (strategy.ratio == 1.0) return strategy.threshold = 0.0;
  return strategy.threshold = calibrate_threshold(pool, strategy.ratio);
}

}  // namespace plmix
