#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace plmix {

/// Dense row-major matrix of doubles. Every hidden activation, parameter and
/// feature stack in the library is one of these.
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor2 from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor2 row_vector(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v);
  bool all_finite() const;
  std::string shape_str() const;

  /// Bitwise equality (distinguishes -0.0 from 0.0, equal NaN payloads compare equal).
  bool bit_equal(const Tensor2& other) const;

  friend bool operator==(const Tensor2& a, const Tensor2& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// y = x W + b, with b broadcast over rows.
Tensor2 affine_forward(const Tensor2& x, const Tensor2& W, std::span<const double> b);
inline Tensor2 affine_forward(const Tensor2& x, const Tensor2& W, const Tensor2& b) {
  return affine_forward(x, W, b.values());
}

/// Accumulates dW += xᵀ dy and db += Σ_rows dy. Writes dx = dy Wᵀ when dx is non-null.
void affine_backward(const Tensor2& x, const Tensor2& W, const Tensor2& dy, Tensor2* dx,
                     Tensor2& dW, std::span<double> db);

/// Numerically stable softmax (max-shifted).
std::vector<double> softmax(std::span<const double> v);
/// log Σ exp(v), max-shifted.
double log_sum_exp(std::span<const double> v);

/// Residual position-wise block: y = x + tanh(x W + b). W must be square.
struct BlockCache {
  Tensor2 input;
  Tensor2 activation;  // tanh(x W + b)
};
Tensor2 block_forward(const Tensor2& x, const Tensor2& W, const Tensor2& b, BlockCache* cache);
/// Accumulates into dW/db; returns dx.
Tensor2 block_backward(const BlockCache& cache, const Tensor2& W, const Tensor2& dy, Tensor2& dW,
                       Tensor2& db);

/// Element-wise a += b (shapes must match).
void add_inplace(Tensor2& a, const Tensor2& b);

/// Sinusoidal position features, one row per position.
Tensor2 position_features(std::size_t count, std::size_t dim, double scale);

/// Per-segment row means. boundaries are cumulative (exclusive) segment ends.
Tensor2 segment_mean(const Tensor2& frames, std::span<const std::size_t> boundaries);
/// Gradient of segment_mean: spreads each segment's gradient evenly over its rows.
Tensor2 segment_mean_backward(const Tensor2& d_means, std::span<const std::size_t> boundaries,
                              std::size_t frame_count);

/// Repeats row i of x durations[i] times (length regulator).
Tensor2 upsample(const Tensor2& x, std::span<const int> durations);
/// Gradient of upsample: sums the gradient rows belonging to each source row.
Tensor2 upsample_backward(const Tensor2& d_up, std::span<const int> durations);

/// Cumulative frame boundaries from per-segment durations.
std::vector<std::size_t> boundaries_from_durations(std::span<const int> durations);

}  // namespace plmix
