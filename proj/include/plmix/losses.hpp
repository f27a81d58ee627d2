#pragma once

#include <span>
#include <vector>

#include "plmix/tensor.hpp"

namespace plmix {

struct LossGrad {
  double value = 0.0;
  Tensor2 grad;  // d value / d prediction
};

/// Masked mean squared error over frames with mask = 1 (mask has one entry per row).
/// The sum of squared errors is divided by `normalizer` when it is positive, else by
/// (kept rows × cols). All-zero mask gives value 0 and an all-zero gradient.
LossGrad masked_mse(const Tensor2& pred, const Tensor2& target, std::span<const double> mask,
                    double normalizer = 0.0);

/// Mean cross-entropy of row-wise softmax(logits) against integer labels, over rows with
/// mask = 1 (empty mask means all rows). Same normalizer convention as masked_mse, in rows.
LossGrad cross_entropy(const Tensor2& logits, std::span<const int> labels,
                       std::span<const double> mask = {}, double normalizer = 0.0);

/// Log-domain duration regression: Σ mask_i (pred_i − log d_i)² / normalizer.
/// pred is L×1. Normalizer convention as above, in phonemes.
LossGrad duration_loss(const Tensor2& pred_log, std::span<const int> durations,
                       std::span<const double> mask, double normalizer = 0.0);

}  // namespace plmix
