#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "treeclstm/errors.hpp"

namespace treeclstm {

/// Extent of a rank-4 tensor: items x channels x height x width.
///
/// Activations always use n == 1 (one frame per tensor); kernels use
/// n = output channels and c = input channels.
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  static Shape chw(std::size_t c, std::size_t h, std::size_t w) { return {1, c, h, w}; }

  std::size_t size() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense row-major array of 64-bit reals.
///
/// Values are immutable once a tensor is handed to a tape; gradients live on
/// the tape node (or the owning Parameter), never on the tensor itself.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  /// Throws ShapeError on length mismatch and NumericError on NaN/Inf.
  Tensor(Shape shape, std::vector<double> values);

  static Tensor chw(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0) {
    return Tensor(Shape::chw(c, h, w), fill);
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const double* ptr() const { return data_.data(); }
  double* ptr() { return data_.data(); }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_.h + y) * shape_.w + x];
  }
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_.h + y) * shape_.w + x];
  }
  double at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[((n * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }
  double& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[((n * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }

  /// Same values under a new shape of equal size.
  Tensor reshaped(Shape shape) const;
  bool all_finite() const;
  double sum() const;
  double max_abs() const;

  std::vector<double> release() && { return std::move(data_); }

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<double> data_;
};

/// Largest elementwise |a - b|; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Binary record: three little-endian u32 dims (c, h, w) followed by
/// little-endian f64 values. Tensors with n > 1 are written as (n*c, h, w);
/// readers restore the kernel layout with reshaped().
void write_record(std::ostream& out, const Tensor& t);
Tensor read_record(std::istream& in);

}  // namespace treeclstm
