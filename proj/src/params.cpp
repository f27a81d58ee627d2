#include "plmix/params.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "plmix/errors.hpp"

namespace plmix {

std::size_t ParamStore::add(const std::string& name, const std::string& group, Tensor2 init) {
  if (contains(name)) throw ArgumentError("ParamStore: duplicate parameter '" + name + "'");
  if (!init.all_finite()) throw NumericError("ParamStore: non-finite init for '" + name + "'");
  Tensor2 grad(init.rows(), init.cols());
  params_.push_back(Param{name, group, std::move(init), std::move(grad)});
  by_name_[name] = params_.size() - 1;
  return params_.size() - 1;
}

void ParamStore::replace(std::size_t i, Tensor2 value) {
  auto& p = params_.at(i);
  p.grad = Tensor2(value.rows(), value.cols());
  p.value = std::move(value);
}

std::size_t ParamStore::index(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw ArgumentError("ParamStore: unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

void ParamStore::set_frozen(const std::string& group, bool frozen) {
  if (frozen)
    frozen_.insert(group);
  else
    frozen_.erase(group);
}

std::uint64_t ParamStore::fingerprint(const std::string& group) const {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](std::uint64_t x) {
    for (int i = 0; i < 8; ++i) {
      h ^= (x >> (8 * i)) & 0xFF;
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params_) {
    if (p.group != group) continue;
    for (char c : p.name) feed(static_cast<unsigned char>(c));
    feed(p.value.rows());
    feed(p.value.cols());
    for (double v : p.value.values()) feed(std::bit_cast<std::uint64_t>(v));
  }
  return h;
}

Tensor2 uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  Tensor2 t(rows, cols);
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

double Adam::current_lr() const {
  if (cfg_.warmup_steps <= 0 || t_ == 0) return cfg_.lr;
  const double step = static_cast<double>(t_);
  const double warm = static_cast<double>(cfg_.warmup_steps);
  return cfg_.lr * std::min(step / warm, std::sqrt(warm / step));
}

void Adam::step(ParamStore& store) {
  ++t_;
  const double lr = current_lr();
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (auto& p : store.all()) {
    if (store.is_frozen(p.group)) continue;
    auto& st = state_[p.name];
    if (st.m.rows() != p.value.rows() || st.m.cols() != p.value.cols()) {
      st.m = Tensor2(p.value.rows(), p.value.cols());
      st.v = Tensor2(p.value.rows(), p.value.cols());
    }
    auto w = p.value.values();
    auto g = p.grad.values();
    auto m = st.m.values();
    auto v = st.v.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    if (!p.value.all_finite()) {
      throw NumericError("Adam: parameter '" + p.name + "' became non-finite at step " +
                         std::to_string(t_));
    }
  }
}

}  // namespace plmix
