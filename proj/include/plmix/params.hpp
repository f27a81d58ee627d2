#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "plmix/rng.hpp"
#include "plmix/tensor.hpp"

namespace plmix {

struct Param {
  std::string name;
  std::string group;
  Tensor2 value;
  Tensor2 grad;
};

/// Named parameters with gradient accumulators and per-group freezing.
/// Parameters are addressed by stable indices; adding a parameter never
/// invalidates existing indices.
class ParamStore {
 public:
  std::size_t add(const std::string& name, const std::string& group, Tensor2 init);
  /// Replaces the value of an existing parameter (shape may change) and resets its gradient.
  void replace(std::size_t index, Tensor2 value);

  bool contains(const std::string& name) const { return by_name_.count(name) != 0; }
  std::size_t index(const std::string& name) const;

  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  Param& at(const std::string& name) { return params_[index(name)]; }
  const Param& at(const std::string& name) const { return params_[index(name)]; }

  std::vector<Param>& all() { return params_; }
  const std::vector<Param>& all() const { return params_; }
  std::size_t scalar_count() const;

  void zero_grad();
  void set_frozen(const std::string& group, bool frozen);
  bool is_frozen(const std::string& group) const { return frozen_.count(group) != 0; }
  const std::set<std::string>& frozen_groups() const { return frozen_; }

  /// FNV-style hash over the raw bits of every value in a group.
  std::uint64_t fingerprint(const std::string& group) const;

 private:
  std::vector<Param> params_;
  std::map<std::string, std::size_t> by_name_;
  std::set<std::string> frozen_;
};

/// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
Tensor2 uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Warmup steps for the warmup + inverse-square-root schedule; 0 disables it.
  int warmup_steps = 0;
};

/// Plain Adam. Frozen groups are skipped entirely, so their values never change.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  void step(ParamStore& store);
  double current_lr() const;
  int steps_taken() const { return t_; }

 private:
  struct Moments {
    Tensor2 m, v;
  };
  AdamConfig cfg_;
  int t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace plmix
