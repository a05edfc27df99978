#include "treeclstm/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>

namespace treeclstm {

std::string Shape::str() const {
  std::ostringstream os;
  if (n != 1) os << n << "x";
  os << c << "x" << h << "x" << w;
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.size(), fill) {
  if (!std::isfinite(fill)) throw NumericError("tensor fill value is not finite");
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_.str());
  }
  if (!all_finite()) throw NumericError("tensor constructed with NaN/Inf values");
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape.size() != size()) {
    throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
  }
  Tensor out = *this;
  out.shape_ = shape;
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("max_abs_diff shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw ParseError("truncated tensor record header");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace

void write_record(std::ostream& out, const Tensor& t) {
  const Shape& s = t.shape();
  put_u32(out, static_cast<std::uint32_t>(s.n * s.c));
  put_u32(out, static_cast<std::uint32_t>(s.h));
  put_u32(out, static_cast<std::uint32_t>(s.w));
  std::vector<char> raw(t.size() * 8);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto v = std::bit_cast<std::uint64_t>(t[i]);
    for (int k = 0; k < 8; ++k) raw[i * 8 + k] = static_cast<char>((v >> (8 * k)) & 0xFFu);
  }
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
}

Tensor read_record(std::istream& in) {
  const std::uint32_t c = get_u32(in);
  const std::uint32_t h = get_u32(in);
  const std::uint32_t w = get_u32(in);
  const Shape shape = Shape::chw(c, h, w);
  if (shape.size() > (std::size_t{1} << 32)) throw ParseError("tensor record too large: " + shape.str());
  std::vector<double> values(shape.size());
  std::vector<unsigned char> raw(values.size() * 8);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw ParseError("truncated tensor record body for shape " + shape.str());
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t v = 0;
    for (int k = 7; k >= 0; --k) v = (v << 8) | raw[i * 8 + k];
    values[i] = std::bit_cast<double>(v);
  }
  return Tensor(shape, std::move(values));
}

}  // namespace treeclstm
