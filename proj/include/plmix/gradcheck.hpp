#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "plmix/params.hpp"

namespace plmix {

/// Computes the loss at the store's current values. When `accumulate` is true the
/// function also adds d loss / d param into each parameter's grad.
using LossFn = std::function<double(ParamStore& store, bool accumulate)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients with central differences (f(θ+ε) − f(θ−ε)) / 2ε on every
/// coordinate of every non-frozen parameter. Relative error per coordinate is
/// |a − n| / max(|a|, |n|, floor); the floor keeps vanishing gradients from dominating.
GradCheckResult grad_check(const LossFn& loss_fn, ParamStore& store, double eps = 1e-5,
                           double floor = 1e-6);

}  // namespace plmix
