#include "plmix/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "plmix/errors.hpp"

namespace plmix {

GradCheckResult grad_check(const LossFn& loss_fn, ParamStore& store, double eps, double floor) {
  if (eps < 1e-6 || eps > 1e-4) throw ArgumentError("grad_check: step must lie in [1e-6, 1e-4]");
  store.zero_grad();
  const double base = loss_fn(store, true);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss at the base point");

  std::vector<Tensor2> analytic;
  analytic.reserve(store.all().size());
  for (const auto& p : store.all()) analytic.push_back(p.grad);

  GradCheckResult result;
  for (std::size_t pi = 0; pi < store.all().size(); ++pi) {
    auto& p = store[pi];
    if (store.is_frozen(p.group)) continue;
    auto values = p.value.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = loss_fn(store, false);
      values[i] = saved - eps;
      const double down = loss_fn(store, false);
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite loss while perturbing '" + p.name + "'[" +
                           std::to_string(i) + "]");
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi].values()[i];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++result.coordinates;
      if (rel > result.max_rel_error || result.worst_param.empty()) {
        if (rel >= result.max_rel_error) {
          result.max_rel_error = rel;
          result.worst_param = p.name;
          result.worst_index = i;
        }
      }
    }
  }
  return result;
}

}  // namespace plmix
