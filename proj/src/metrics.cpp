#include "plmix/metrics.hpp"

#include <algorithm>
#include <limits>

#include "plmix/errors.hpp"

namespace plmix {

std::size_t edit_distance(std::span<const int> hyp, std::span<const int> ref) {
  std::vector<std::size_t> row(ref.size() + 1);
  for (std::size_t j = 0; j <= ref.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= hyp.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= ref.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (hyp[i - 1] == ref[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[ref.size()];
}

double per(std::span<const int> hyp, std::span<const int> ref) {
  if (ref.empty()) throw MetricError("per: empty reference");
  return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

std::vector<int> decode_oracle(const Tensor2& frames, const ToyLanguage& lang) {
  if (frames.cols() != static_cast<std::size_t>(lang.frame_dim()))
    throw DimensionError("decode_oracle: frames are " + frames.shape_str());
  std::vector<int> out;
  for (std::size_t t = 0; t < frames.rows(); ++t) {
    auto f = frames.row(t);
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int p = 0; p < lang.inventory_size(); ++p) {
      auto proto = lang.prototypes.row(static_cast<std::size_t>(p));
      double d = 0.0;
      for (std::size_t c = 0; c < f.size(); ++c) d += (f[c] - proto[c]) * (f[c] - proto[c]);
      if (d < best) {
        best = d;
        arg = p;
      }
    }
    const int id = lang.global_id(arg);
    if (out.empty() || out.back() != id) out.push_back(id);
  }
  return out;
}

void PerTally::add(std::span<const int> hyp, std::span<const int> ref) {
  if (ref.empty()) throw MetricError("per: empty reference");
  edits += edit_distance(hyp, ref);
  reference += ref.size();
}

double PerTally::rate() const {
  if (reference == 0) throw MetricError("per: no references scored");
  return static_cast<double>(edits) / static_cast<double>(reference);
}

double evaluate_per(const SynthModel& m, const ToyLanguage& lang, std::span<const Utterance> eval) {
  PerTally tally;
  for (const auto& u : eval) {
    const auto enc = phn_encode(m, lang.index, u.phonemes);
    tally.add(decode_oracle(infer_frames(m, enc.output), lang), u.phonemes);
  }
  return tally.rate();
}

double pseudo_label_per(std::span<const PseudoUtterance> pseudo, const WithheldTranscripts& truth) {
  PerTally tally;
  for (const auto& p : pseudo) tally.add(p.phonemes(), truth.phonemes(p.id));
  return tally.rate();
}

}  // namespace plmix
