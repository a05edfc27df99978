#pragma once

#include <random>

#include "treeclstm/autograd.hpp"

namespace treeclstm::test {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline void fill_random(ParameterSet& params, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (double& v : params[p].value.data()) v = u(rng);
  }
}

/// Independent naive-loop cross-correlation with zero padding.
inline Tensor naive_conv(const Tensor& x, const Tensor& k, std::size_t pad) {
  const Shape xs = x.shape(), ks = k.shape();
  const std::size_t oh = xs.h + 2 * pad - ks.h + 1, ow = xs.w + 2 * pad - ks.w + 1;
  Tensor out(Shape::chw(ks.n, oh, ow));
  for (std::size_t o = 0; o < ks.n; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        double s = 0.0;
        for (std::size_t c = 0; c < xs.c; ++c)
          for (std::size_t ky = 0; ky < ks.h; ++ky)
            for (std::size_t kx = 0; kx < ks.w; ++kx) {
              const long iy = static_cast<long>(y + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(xx + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(xs.h) || ix >= static_cast<long>(xs.w)) continue;
              s += x.at(c, iy, ix) * k.at(o, c, ky, kx);
            }
        out.at(o, y, xx) = s;
      }
  return out;
}

}  // namespace treeclstm::test
