#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lfme/errors.hpp"

namespace lfme {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. Plain value type; gradient bookkeeping
/// lives on the Tape (see autodiff.hpp).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_str(shape_) + " needs " +
                           std::to_string(shape_size(shape_)) +
                           " values, got " + std::to_string(data_.size()));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  static Tensor row(std::vector<double> data) {
    const std::size_t n = data.size();
    return Tensor({1, n}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Leading dimension; a rank-1 tensor is a single row.
  std::size_t rows() const {
    if (shape_.empty()) return 1;
    return shape_.size() == 1 ? 1 : shape_[0];
  }
  /// Trailing dimension.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * cols() + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }

  std::span<const double> row_span(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }

  /// Copy of rows [begin, end).
  Tensor slice_rows(std::size_t begin, std::size_t end) const {
    const std::size_t c = cols();
    return Tensor({end - begin, c},
                  std::vector<double>(data_.begin() + begin * c,
                                      data_.begin() + end * c));
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Stacks 2-D tensors with equal column counts along the batch dimension.
inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) return Tensor({0, 0});
  const std::size_t c = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) {
      throw DimensionError("concat_rows: column mismatch " +
                           shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    rows += p.rows();
  }
  std::vector<double> out;
  out.reserve(rows * c);
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return Tensor({rows, c}, std::move(out));
}

/// Forward kernels shared by the taped ops and tape-free inference, so both
/// paths produce bit-identical values.
namespace kernels {

inline void matmul(std::span<const double> a, std::span<const double> b,
                   std::span<double> out, std::size_t m, std::size_t k,
                   std::size_t n) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

/// Max-subtracted exp-normalization of one row.
inline void softmax_row(std::span<const double> z, std::span<double> out) {
  double mx = z[0];
  for (double v : z) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite logit");
    mx = std::max(mx, v);
  }
  double total = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) {
    out[c] = std::exp(z[c] - mx);
    total += out[c];
  }
  for (std::size_t c = 0; c < z.size(); ++c) out[c] /= total;
}

/// Row-wise softmax of a B x K tensor.
inline Tensor softmax(const Tensor& z) {
  if (z.cols() < 2) {
    throw DimensionError("softmax needs at least 2 classes, got shape " +
                         shape_str(z.shape()));
  }
  Tensor out(z.shape());
  const std::size_t k = z.cols();
  for (std::size_t r = 0; r < z.rows(); ++r) {
    softmax_row(z.row_span(r), out.data().subspan(r * k, k));
  }
  return out;
}

}  // namespace kernels

}  // namespace lfme
