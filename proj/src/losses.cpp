#include "plmix/losses.hpp"

#include <cmath>
#include <string>

#include "plmix/errors.hpp"

namespace plmix {

namespace {
void check_mask(std::span<const double> mask, std::size_t rows, const char* who) {
  if (mask.size() != rows) {
    throw DimensionError(std::string(who) + ": mask has " + std::to_string(mask.size()) +
                         " entries for " + std::to_string(rows) + " rows");
  }
  for (double m : mask) {
    if (m != 0.0 && m != 1.0) throw ArgumentError(std::string(who) + ": mask entries must be 0 or 1");
  }
}

double kept(std::span<const double> mask) {
  double n = 0.0;
  for (double m : mask) n += m;
  return n;
}
}  // namespace

LossGrad masked_mse(const Tensor2& pred, const Tensor2& target, std::span<const double> mask,
                    double normalizer) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw DimensionError("masked_mse: prediction " + pred.shape_str() + " vs target " +
                         target.shape_str());
  }
  check_mask(mask, pred.rows(), "masked_mse");
  LossGrad out{0.0, Tensor2(pred.rows(), pred.cols())};
  const double denom =
      normalizer > 0.0 ? normalizer : kept(mask) * static_cast<double>(pred.cols());
  if (denom <= 0.0) return out;
  double sse = 0.0;
  for (std::size_t t = 0; t < pred.rows(); ++t) {
    if (mask[t] == 0.0) continue;
    for (std::size_t c = 0; c < pred.cols(); ++c) {
      const double diff = pred(t, c) - target(t, c);
      sse += diff * diff;
      out.grad(t, c) = 2.0 * diff / denom;
    }
  }
  out.value = sse / denom;
  return out;
}

LossGrad cross_entropy(const Tensor2& logits, std::span<const int> labels,
                       std::span<const double> mask, double normalizer) {
  if (labels.size() != logits.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(logits.rows()) + " rows");
  }
  std::vector<double> ones;
  if (mask.empty()) {
    ones.assign(logits.rows(), 1.0);
    mask = ones;
  }
  check_mask(mask, logits.rows(), "cross_entropy");
  LossGrad out{0.0, Tensor2(logits.rows(), logits.cols())};
  const double denom = normalizer > 0.0 ? normalizer : kept(mask);
  if (denom <= 0.0) return out;
  double total = 0.0;
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    if (mask[t] == 0.0) continue;
    const int y = labels[t];
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols())
      throw ArgumentError("cross_entropy: label " + std::to_string(y) + " out of range");
    auto row = logits.row(t);
    const auto p = softmax(row);
    total += log_sum_exp(row) - row[static_cast<std::size_t>(y)];
    for (std::size_t c = 0; c < p.size(); ++c)
      out.grad(t, c) = (p[c] - (static_cast<int>(c) == y ? 1.0 : 0.0)) / denom;
  }
  out.value = total / denom;
  return out;
}

LossGrad duration_loss(const Tensor2& pred_log, std::span<const int> durations,
                       std::span<const double> mask, double normalizer) {
  if (pred_log.cols() != 1 || pred_log.rows() != durations.size()) {
    throw DimensionError("duration_loss: prediction " + pred_log.shape_str() + " for " +
                         std::to_string(durations.size()) + " durations");
  }
  check_mask(mask, durations.size(), "duration_loss");
  LossGrad out{0.0, Tensor2(pred_log.rows(), 1)};
  const double denom = normalizer > 0.0 ? normalizer : kept(mask);
  if (denom <= 0.0) return out;
  double sse = 0.0;
  for (std::size_t i = 0; i < durations.size(); ++i) {
    if (mask[i] == 0.0) continue;
    if (durations[i] <= 0) throw DurationError("duration_loss: non-positive target duration");
    const double diff = pred_log(i, 0) - std::log(static_cast<double>(durations[i]));
    sse += diff * diff;
    out.grad(i, 0) = 2.0 * diff / denom;
  }
  out.value = sse / denom;
  return out;
}

}  // namespace plmix
