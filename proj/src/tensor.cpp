#include "plmix/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>

#include "plmix/errors.hpp"

namespace plmix {

Tensor2::Tensor2(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor2::Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("Tensor2: data length " + std::to_string(data_.size()) +
                         " does not match shape " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
}

Tensor2 Tensor2::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("Tensor2::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor2(r, c, std::move(data));
}

Tensor2 Tensor2::row_vector(std::span<const double> values) {
  return Tensor2(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

void Tensor2::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor2::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor2::shape_str() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

bool Tensor2::bit_equal(const Tensor2& other) const {
  if (rows_ != other.rows_ || cols_ != other.cols_) return false;
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(data_[i]) != std::bit_cast<std::uint64_t>(other.data_[i]))
      return false;
  }
  return true;
}

Tensor2 affine_forward(const Tensor2& x, const Tensor2& W, std::span<const double> b) {
  if (x.cols() != W.rows() || b.size() != W.cols()) {
    throw DimensionError("affine_forward: x is " + x.shape_str() + ", W is " + W.shape_str() +
                         ", b has length " + std::to_string(b.size()));
  }
  const std::size_t n = x.rows(), m = W.cols(), inner = x.cols();
  Tensor2 y(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* out = &y(i, 0);
    for (std::size_t j = 0; j < m; ++j) out[j] = b[j];
    for (std::size_t k = 0; k < inner; ++k) {
      const double xik = x(i, k);
      const double* w = W.row(k).data();
      for (std::size_t j = 0; j < m; ++j) out[j] += xik * w[j];
    }
  }
  return y;
}

void affine_backward(const Tensor2& x, const Tensor2& W, const Tensor2& dy, Tensor2* dx,
                     Tensor2& dW, std::span<double> db) {
  if (dy.rows() != x.rows() || dy.cols() != W.cols() || dW.rows() != W.rows() ||
      dW.cols() != W.cols() || db.size() != W.cols()) {
    throw DimensionError("affine_backward: x is " + x.shape_str() + ", W is " + W.shape_str() +
                         ", dy is " + dy.shape_str());
  }
  const std::size_t n = x.rows(), m = W.cols(), inner = x.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const double* g = dy.row(i).data();
    for (std::size_t j = 0; j < m; ++j) db[j] += g[j];
    for (std::size_t k = 0; k < inner; ++k) {
      const double xik = x(i, k);
      double* dw = &dW(k, 0);
      for (std::size_t j = 0; j < m; ++j) dw[j] += xik * g[j];
    }
  }
  if (dx != nullptr) {
    *dx = Tensor2(n, inner);
    for (std::size_t i = 0; i < n; ++i) {
      const double* g = dy.row(i).data();
      for (std::size_t k = 0; k < inner; ++k) {
        const double* w = W.row(k).data();
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) acc += w[j] * g[j];
        (*dx)(i, k) = acc;
      }
    }
  }
}

std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw ArgumentError("softmax: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    total += out[i];
  }
  for (double& o : out) o /= total;
  return out;
}

double log_sum_exp(std::span<const double> v) {
  if (v.empty()) throw ArgumentError("log_sum_exp: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double x : v) total += std::exp(x - mx);
  return mx + std::log(total);
}

Tensor2 block_forward(const Tensor2& x, const Tensor2& W, const Tensor2& b, BlockCache* cache) {
  if (W.rows() != W.cols()) {
    throw DimensionError("block_forward: residual block needs a square weight, got " +
                         W.shape_str());
  }
  Tensor2 a = affine_forward(x, W, b);
  for (double& v : a.values()) v = std::tanh(v);
  Tensor2 y = x;
  add_inplace(y, a);
  if (cache != nullptr) {
    cache->input = x;
    cache->activation = std::move(a);
  }
  return y;
}

Tensor2 block_backward(const BlockCache& cache, const Tensor2& W, const Tensor2& dy, Tensor2& dW,
                       Tensor2& db) {
  Tensor2 dpre = dy;
  auto pre = dpre.values();
  auto act = cache.activation.values();
  for (std::size_t i = 0; i < pre.size(); ++i) pre[i] *= 1.0 - act[i] * act[i];
  Tensor2 dx;
  affine_backward(cache.input, W, dpre, &dx, dW, db.values());
  add_inplace(dx, dy);
  return dx;
}

void add_inplace(Tensor2& a, const Tensor2& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("add_inplace: " + a.shape_str() + " vs " + b.shape_str());
  }
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
}

Tensor2 position_features(std::size_t count, std::size_t dim, double scale) {
  Tensor2 pe(count, dim);
  for (std::size_t p = 0; p < count; ++p) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / dim);
      const double angle = static_cast<double>(p) * rate;
      pe(p, i) = scale * ((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

namespace {
void check_boundaries(std::span<const std::size_t> boundaries, std::size_t frame_count,
                      const char* who) {
  std::size_t prev = 0;
  for (std::size_t e : boundaries) {
    if (e <= prev) {
      throw AlignmentError(std::string(who) + ": boundaries must be strictly increasing");
    }
    prev = e;
  }
  if (boundaries.empty() || boundaries.back() != frame_count) {
    throw AlignmentError(std::string(who) + ": boundaries end at " +
                         std::to_string(boundaries.empty() ? 0 : boundaries.back()) +
                         " but there are " + std::to_string(frame_count) + " frames");
  }
}
}  // namespace

Tensor2 segment_mean(const Tensor2& frames, std::span<const std::size_t> boundaries) {
  check_boundaries(boundaries, frames.rows(), "segment_mean");
  Tensor2 out(boundaries.size(), frames.cols());
  std::size_t start = 0;
  for (std::size_t s = 0; s < boundaries.size(); ++s) {
    const std::size_t end = boundaries[s];
    auto dst = out.row(s);
    for (std::size_t t = start; t < end; ++t) {
      auto src = frames.row(t);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
    const double inv = 1.0 / static_cast<double>(end - start);
    for (double& v : dst) v *= inv;
    start = end;
  }
  return out;
}

Tensor2 segment_mean_backward(const Tensor2& d_means, std::span<const std::size_t> boundaries,
                              std::size_t frame_count) {
  check_boundaries(boundaries, frame_count, "segment_mean_backward");
  Tensor2 d_frames(frame_count, d_means.cols());
  std::size_t start = 0;
  for (std::size_t s = 0; s < boundaries.size(); ++s) {
    const std::size_t end = boundaries[s];
    const double inv = 1.0 / static_cast<double>(end - start);
    auto g = d_means.row(s);
    for (std::size_t t = start; t < end; ++t) {
      auto dst = d_frames.row(t);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = g[c] * inv;
    }
    start = end;
  }
  return d_frames;
}

Tensor2 upsample(const Tensor2& x, std::span<const int> durations) {
  if (durations.size() != x.rows()) {
    throw DimensionError("upsample: " + std::to_string(durations.size()) + " durations for " +
                         std::to_string(x.rows()) + " rows");
  }
  std::size_t total = 0;
  for (int d : durations) {
    if (d <= 0) throw DurationError("upsample: durations must be positive, got " + std::to_string(d));
    total += static_cast<std::size_t>(d);
  }
  Tensor2 out(total, x.cols());
  std::size_t t = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto src = x.row(i);
    for (int r = 0; r < durations[i]; ++r, ++t) std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

Tensor2 upsample_backward(const Tensor2& d_up, std::span<const int> durations) {
  Tensor2 out(durations.size(), d_up.cols());
  std::size_t t = 0;
  for (std::size_t i = 0; i < durations.size(); ++i) {
    auto dst = out.row(i);
    for (int r = 0; r < durations[i]; ++r, ++t) {
      auto src = d_up.row(t);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  }
  if (t != d_up.rows()) throw DimensionError("upsample_backward: frame count mismatch");
  return out;
}

std::vector<std::size_t> boundaries_from_durations(std::span<const int> durations) {
  std::vector<std::size_t> b;
  b.reserve(durations.size());
  std::size_t acc = 0;
  for (int d : durations) {
    if (d <= 0) throw DurationError("durations must be positive, got " + std::to_string(d));
    acc += static_cast<std::size_t>(d);
    b.push_back(acc);
  }
  return b;
}

}  // namespace plmix
