#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "plmix/gradcheck.hpp"

namespace plmix {

struct GradCase {
  std::string name;
  double tolerance = 0.0;
  GradCheckResult result;
  bool pass() const { return result.max_rel_error < tolerance; }
};

inline constexpr double kLayerTolerance = 1e-4;
inline constexpr double kComposedTolerance = 1e-3;

/// Names of the registered layer checks.
std::vector<std::string> grad_case_names();
/// One named layer check at the given seed.
GradCase run_grad_case(const std::string& name, std::uint64_t seed);
/// Every layer type once, then the composed model once per seed in [seed, seed + composed_seeds).
std::vector<GradCase> run_grad_suite(std::uint64_t seed = 1, int composed_seeds = 10);

}  // namespace plmix
