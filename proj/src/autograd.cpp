#include "treeclstm/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace treeclstm {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// ---- ParameterSet ----------------------------------------------------------

ParameterSet::ParameterSet(const ParameterSet& other) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter>(*p));
}

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this != &other) {
    ParameterSet copy(other);
    params_ = std::move(copy.params_);
  }
  return *this;
}

Parameter& ParameterSet::add(const std::string& name, Shape shape, bool recurrent) {
  if (find(name) != nullptr) throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Tensor(shape);
  p->grad = Tensor(shape);
  p->recurrent = recurrent;
  params_.push_back(std::move(p));
  return *params_.back();
}

const Parameter* ParameterSet::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

Parameter& ParameterSet::get(const std::string& name) {
  return const_cast<Parameter&>(std::as_const(*this).get(name));
}

const Parameter& ParameterSet::get(const std::string& name) const {
  const Parameter* p = find(name);
  if (p == nullptr) throw ConfigError("unknown parameter: " + name);
  return *p;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) std::fill(p->grad.data().begin(), p->grad.data().end(), 0.0);
}

void ParameterSet::init_gaussian(unsigned long long seed, double stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (auto& p : params_) {
    const bool bias = p->name.size() >= 2 && p->name.ends_with(".b");
    for (double& v : p->value.data()) v = bias ? 0.0 : normal(rng);
  }
}

std::vector<Tensor> ParameterSet::snapshot() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p->value);
  return out;
}

void ParameterSet::restore(const std::vector<Tensor>& values) {
  if (values.size() != params_.size()) throw ShapeError("snapshot size does not match parameter set");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i].shape() == params_[i]->value.shape())) {
      throw ShapeError("snapshot shape mismatch for " + params_[i]->name);
    }
    params_[i]->value = values[i];
  }
}

// ---- Tape ------------------------------------------------------------------

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Tape::variable(Tensor value) { return push(std::move(value), true, nullptr); }

Var Tape::param(Parameter& p) {
  Var v = push(p.value, true, nullptr);
  nodes_[v.id].param = &p;
  return v;
}

Var Tape::push(Tensor value, bool needs_grad, Backward fn) {
#ifndef NDEBUG
  if (!value.all_finite()) throw NumericError("op produced NaN/Inf (tape node " + std::to_string(nodes_.size()) + ")");
#endif
  Node node;
  node.value = std::move(value);
  node.needs_grad = needs_grad;
  if (needs_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

std::span<double> Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Tensor(n.value.shape());
  return Tensor(n.value.shape(), n.grad);
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to another tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + nodes_[loss.id].value.shape().str());
  }
  if (!nodes_[loss.id].needs_grad) throw std::logic_error("backward: loss is detached from every gradient leaf");
  for (Node& n : nodes_) n.grad.clear();
  nodes_[loss.id].grad.assign(1, 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    auto g = n.param->grad.data();
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
  }
}

// ---- helpers ---------------------------------------------------------------

namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw std::invalid_argument("var is not bound to a tape");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("vars belong to different tapes");
  return tape_of(a);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

void require_single(const char* op, const Tensor& t) {
  if (t.shape().n != 1) throw ShapeError(std::string(op) + ": expected a single item, got " + t.shape().str());
}

void accumulate(Tape& tape, Var v, std::span<const double> g) {
  if (!tape.needs_grad(v.id)) return;
  auto buf = tape.grad_buffer(v);
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

// Output ids are assigned sequentially, so an op can refer to its own output
// node from inside its backward closure.
std::size_t next_id(const Tape& t) { return t.size(); }

}  // namespace

// ---- convolution -----------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t in_c, in_h, in_w;
  std::size_t out_c, kh, kw;
  std::size_t pad_h, pad_w;
  std::size_t out_h, out_w;

  std::size_t rows() const { return in_c * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
  bool direct() const { return kh == 1 && kw == 1 && pad_h == 0 && pad_w == 0; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& k, Padding padding) {
  if (x.n != 1) throw ShapeError("conv2d: input must hold a single item, got " + x.str());
  if (k.c != x.c) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(k.c) + " input channels, input has " +
                     std::to_string(x.c));
  }
  ConvGeometry g{x.c, x.h, x.w, k.n, k.h, k.w, 0, 0, 0, 0};
  if (padding == Padding::Same) {
    if (k.h % 2 == 0 || k.w % 2 == 0) throw ConfigError("conv2d: same padding needs odd kernel, got " + k.str());
    g.pad_h = k.h / 2;
    g.pad_w = k.w / 2;
  }
  if (x.h + 2 * g.pad_h < k.h || x.w + 2 * g.pad_w < k.w) {
    throw ShapeError("conv2d: kernel " + k.str() + " larger than input " + x.str());
  }
  g.out_h = x.h + 2 * g.pad_h - k.h + 1;
  g.out_w = x.w + 2 * g.pad_w - k.w + 1;
  return g;
}

void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.in_c; ++c) {
    const double* plane = x + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          double* dst = row + oy * g.out_w;
          const long iy = static_cast<long>(oy + ky) - static_cast<long>(g.pad_h);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox + kx) - static_cast<long>(g.pad_w);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.in_w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* x) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.in_c; ++c) {
    double* plane = x + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy + ky) - static_cast<long>(g.pad_h);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          const double* src = row + oy * g.out_w;
          double* dst = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox + kx) - static_cast<long>(g.pad_w);
            if (ix >= 0 && ix < static_cast<long>(g.in_w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}


}  // namespace

Var conv2d(Var input, Var kernel, Padding padding) {
  Tape& tape = tape_of(input, kernel);
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  const ConvGeometry g = conv_geometry(x.shape(), k.shape(), padding);

  // im2col writes every entry, so the buffer is left uninitialized.
  std::shared_ptr<double[]> cols;
  const double* cols_ptr = x.ptr();
  if (!g.direct()) {
    cols.reset(new double[g.rows() * g.cols()]);
    im2col(g, x.ptr(), cols.get());
    cols_ptr = cols.get();
  }
  Tensor out(Shape::chw(g.out_c, g.out_h, g.out_w));
  MapMat(out.ptr(), g.out_c, g.cols()).noalias() =
      ConstMapMat(k.ptr(), g.out_c, g.rows()) * ConstMapMat(cols_ptr, g.rows(), g.cols());

  const bool ng = tape.needs_grad(input.id) || tape.needs_grad(kernel.id);
  return tape.push(std::move(out), ng, [input, kernel, g, cols](Tape& t, std::span<const double> gy) {
    ConstMapMat gout(gy.data(), g.out_c, g.cols());
    const double* cp = g.direct() ? t.value(input).ptr() : cols.get();
    if (t.needs_grad(kernel.id)) {
      MapMat(t.grad_buffer(kernel).data(), g.out_c, g.rows()).noalias() +=
          gout * ConstMapMat(cp, g.rows(), g.cols()).transpose();
    }
    if (t.needs_grad(input.id)) {
      ConstMapMat kmat(t.value(kernel).ptr(), g.out_c, g.rows());
      auto gx = t.grad_buffer(input);
      if (g.direct()) {
        MapMat(gx.data(), g.rows(), g.cols()).noalias() += kmat.transpose() * gout;
      } else {
        RowMat gcols = kmat.transpose() * gout;
        col2im_add(g, gcols.data(), gx.data());
      }
    }
  });
}

Var add_channel_bias(Var x, Var bias) {
  Tape& tape = tape_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_single("add_channel_bias", xv);
  if (bv.size() != xv.shape().c) {
    throw ShapeError("add_channel_bias: bias has " + std::to_string(bv.size()) + " entries for " +
                     std::to_string(xv.shape().c) + " channels");
  }
  const std::size_t plane = xv.shape().plane();
  Tensor out = xv;
  for (std::size_t c = 0; c < xv.shape().c; ++c) {
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] += bv[c];
  }
  const bool ng = tape.needs_grad(x.id) || tape.needs_grad(bias.id);
  return tape.push(std::move(out), ng, [x, bias, plane](Tape& t, std::span<const double> gy) {
    accumulate(t, x, gy);
    if (t.needs_grad(bias.id)) {
      auto gb = t.grad_buffer(bias);
      for (std::size_t c = 0; c < gb.size(); ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += gy[c * plane + i];
        gb[c] += s;
      }
    }
  });
}

// ---- elementwise -----------------------------------------------------------

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const bool ng = tape.needs_grad(a.id) || tape.needs_grad(b.id);
  return tape.push(std::move(out), ng, [a, b](Tape& t, std::span<const double> gy) {
    accumulate(t, a, gy);
    accumulate(t, b, gy);
  });
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const bool ng = tape.needs_grad(a.id) || tape.needs_grad(b.id);
  return tape.push(std::move(out), ng, [a, b](Tape& t, std::span<const double> gy) {
    accumulate(t, a, gy);
    if (t.needs_grad(b.id)) {
      auto gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
    }
  });
}

Var hadamard(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape("hadamard", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const bool ng = tape.needs_grad(a.id) || tape.needs_grad(b.id);
  return tape.push(std::move(out), ng, [a, b](Tape& t, std::span<const double> gy) {
    if (t.needs_grad(a.id)) {
      auto ga = t.grad_buffer(a);
      const Tensor& bv = t.value(b);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (t.needs_grad(b.id)) {
      auto gb = t.grad_buffer(b);
      const Tensor& av = t.value(a);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return tape.push(std::move(out), tape.needs_grad(a.id), [a, s](Tape& t, std::span<const double> gy) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += s * gy[i];
  });
}

Var add_n(std::span<const Var> xs) {
  if (xs.empty()) throw std::invalid_argument("add_n: empty input list");
  Tape& tape = tape_of(xs[0]);
  Tensor out = xs[0].value();
  bool ng = tape.needs_grad(xs[0].id);
  for (std::size_t k = 1; k < xs.size(); ++k) {
    tape_of(xs[0], xs[k]);
    const Tensor& v = xs[k].value();
    require_same_shape("add_n", out, v);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    ng = ng || tape.needs_grad(xs[k].id);
  }
  std::vector<Var> inputs(xs.begin(), xs.end());
  return tape.push(std::move(out), ng, [inputs](Tape& t, std::span<const double> gy) {
    for (Var v : inputs) accumulate(t, v, gy);
  });
}

Var sigmoid(Var x) {
  Tape& tape = tape_of(x);
  Tensor out = x.value();
  for (double& v : out.data()) v = 1.0 / (1.0 + std::exp(-v));
  const std::size_t self = next_id(tape);
  return tape.push(std::move(out), tape.needs_grad(x.id), [x, self](Tape& t, std::span<const double> gy) {
    auto gx = t.grad_buffer(x);
    const Tensor& y = t.value(Var{&t, self});
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * y[i] * (1.0 - y[i]);
  });
}

Var tanh(Var x) {
  Tape& tape = tape_of(x);
  Tensor out = x.value();
  for (double& v : out.data()) v = std::tanh(v);
  const std::size_t self = next_id(tape);
  return tape.push(std::move(out), tape.needs_grad(x.id), [x, self](Tape& t, std::span<const double> gy) {
    auto gx = t.grad_buffer(x);
    const Tensor& y = t.value(Var{&t, self});
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (1.0 - y[i] * y[i]);
  });
}

Var relu(Var x) {
  Tape& tape = tape_of(x);
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return tape.push(std::move(out), tape.needs_grad(x.id), [x](Tape& t, std::span<const double> gy) {
    auto gx = t.grad_buffer(x);
    const Tensor& xv = t.value(x);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += gy[i];
    }
  });
}

// ---- resampling ------------------------------------------------------------

Var maxpool2(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_single("maxpool2", xv);
  const Shape s = xv.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("maxpool2: odd spatial dims " + s.str());
  const std::size_t oh = s.h / 2, ow = s.w / 2;
  Tensor out(Shape::chw(s.c, oh, ow));
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  for (std::size_t c = 0; c < s.c; ++c) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        std::size_t best = (c * s.h + 2 * y) * s.w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (c * s.h + 2 * y + dy) * s.w + 2 * xx + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = (c * oh + y) * ow + xx;
        out[o] = xv[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return tape.push(std::move(out), tape.needs_grad(x.id), [x, argmax](Tape& t, std::span<const double> gy) {
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[(*argmax)[i]] += gy[i];
  });
}

Var upconv2(Var x, Var kernel) {
  Tape& tape = tape_of(x, kernel);
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  require_single("upconv2", xv);
  const Shape s = xv.shape();
  const Shape ks = kv.shape();
  if (ks.h != 2 || ks.w != 2) throw ConfigError("upconv2: kernel must be 2x2, got " + ks.str());
  if (ks.c != s.c) throw ShapeError("upconv2: kernel input channels " + ks.str() + " vs input " + s.str());
  const std::size_t oc = ks.n, ic = s.c, hw = s.plane();
  // Rows (o, a, b) of the permuted kernel map input channels to one of the
  // four output phases.
  auto kp = std::make_shared<RowMat>(oc * 4, ic);
  for (std::size_t o = 0; o < oc; ++o) {
    for (std::size_t c = 0; c < ic; ++c) {
      for (std::size_t ab = 0; ab < 4; ++ab) (*kp)(o * 4 + ab, c) = kv[(o * ic + c) * 4 + ab];
    }
  }
  RowMat y = (*kp) * ConstMapMat(xv.ptr(), ic, hw);
  Tensor out(Shape::chw(oc, 2 * s.h, 2 * s.w));
  for (std::size_t o = 0; o < oc; ++o) {
    for (std::size_t ab = 0; ab < 4; ++ab) {
      const std::size_t a = ab / 2, b = ab % 2;
      for (std::size_t i = 0; i < s.h; ++i) {
        for (std::size_t j = 0; j < s.w; ++j) out.at(o, 2 * i + a, 2 * j + b) = y(o * 4 + ab, i * s.w + j);
      }
    }
  }
  const bool ng = tape.needs_grad(x.id) || tape.needs_grad(kernel.id);
  return tape.push(std::move(out), ng, [x, kernel, kp, s, oc, ic, hw](Tape& t, std::span<const double> gy) {
    RowMat gyp(oc * 4, hw);
    const std::size_t ow = 2 * s.w;
    for (std::size_t o = 0; o < oc; ++o) {
      for (std::size_t ab = 0; ab < 4; ++ab) {
        const std::size_t a = ab / 2, b = ab % 2;
        for (std::size_t i = 0; i < s.h; ++i) {
          for (std::size_t j = 0; j < s.w; ++j) {
            gyp(o * 4 + ab, i * s.w + j) = gy[(o * 2 * s.h + 2 * i + a) * ow + 2 * j + b];
          }
        }
      }
    }
    if (t.needs_grad(kernel.id)) {
      RowMat gkp = gyp * ConstMapMat(t.value(x).ptr(), ic, hw).transpose();
      auto gk = t.grad_buffer(kernel);
      for (std::size_t o = 0; o < oc; ++o) {
        for (std::size_t c = 0; c < ic; ++c) {
          for (std::size_t ab = 0; ab < 4; ++ab) gk[(o * ic + c) * 4 + ab] += gkp(o * 4 + ab, c);
        }
      }
    }
    if (t.needs_grad(x.id)) {
      MapMat(t.grad_buffer(x).data(), ic, hw).noalias() += kp->transpose() * gyp;
    }
  });
}

// ---- layout ----------------------------------------------------------------

Var concat_channels(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_single("concat_channels", av);
  require_single("concat_channels", bv);
  const Shape sa = av.shape(), sb = bv.shape();
  if (sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: spatial mismatch " + sa.str() + " vs " + sb.str());
  }
  std::vector<double> values(av.data().begin(), av.data().end());
  values.insert(values.end(), bv.data().begin(), bv.data().end());
  Tensor out(Shape::chw(sa.c + sb.c, sa.h, sa.w), std::move(values));
  const std::size_t split = av.size();
  const bool ng = tape.needs_grad(a.id) || tape.needs_grad(b.id);
  return tape.push(std::move(out), ng, [a, b, split](Tape& t, std::span<const double> gy) {
    accumulate(t, a, gy.subspan(0, split));
    accumulate(t, b, gy.subspan(split));
  });
}

Var slice_channels(Var x, std::size_t begin, std::size_t count) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_single("slice_channels", xv);
  const Shape s = xv.shape();
  if (begin + count > s.c) {
    throw ShapeError("slice_channels: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + s.str());
  }
  const std::size_t off = begin * s.plane(), len = count * s.plane();
  Tensor out(Shape::chw(count, s.h, s.w),
             std::vector<double>(xv.data().begin() + off, xv.data().begin() + off + len));
  return tape.push(std::move(out), tape.needs_grad(x.id), [x, off](Tape& t, std::span<const double> gy) {
    auto gx = t.grad_buffer(x).subspan(off, gy.size());
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

Var stack_kernels(std::span<const Var> kernels) {
  if (kernels.empty()) throw std::invalid_argument("stack_kernels: empty list");
  Tape& tape = tape_of(kernels[0]);
  const Shape first = kernels[0].value().shape();
  std::vector<double> values;
  std::size_t n = 0;
  bool ng = false;
  for (Var k : kernels) {
    tape_of(kernels[0], k);
    const Tensor& kv = k.value();
    const Shape s = kv.shape();
    if (s.c != first.c || s.h != first.h || s.w != first.w) {
      throw ShapeError("stack_kernels: " + s.str() + " does not match " + first.str());
    }
    values.insert(values.end(), kv.data().begin(), kv.data().end());
    n += s.n;
    ng = ng || tape.needs_grad(k.id);
  }
  Tensor out(Shape{n, first.c, first.h, first.w}, std::move(values));
  std::vector<Var> inputs(kernels.begin(), kernels.end());
  return tape.push(std::move(out), ng, [inputs](Tape& t, std::span<const double> gy) {
    std::size_t off = 0;
    for (Var k : inputs) {
      const std::size_t len = t.value(k).size();
      accumulate(t, k, gy.subspan(off, len));
      off += len;
    }
  });
}

Var pad_spatial(Var x, std::size_t top, std::size_t left, std::size_t bottom, std::size_t right) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_single("pad_spatial", xv);
  const Shape s = xv.shape();
  const Shape os = Shape::chw(s.c, s.h + top + bottom, s.w + left + right);
  Tensor out(os);
  for (std::size_t c = 0; c < s.c; ++c) {
    for (std::size_t y = 0; y < s.h; ++y) {
      for (std::size_t xx = 0; xx < s.w; ++xx) out.at(c, y + top, xx + left) = xv.at(c, y, xx);
    }
  }
  return tape.push(std::move(out), tape.needs_grad(x.id), [x, s, os, top, left](Tape& t, std::span<const double> gy) {
    auto gx = t.grad_buffer(x);
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t y = 0; y < s.h; ++y) {
        for (std::size_t xx = 0; xx < s.w; ++xx) {
          gx[(c * s.h + y) * s.w + xx] += gy[(c * os.h + y + top) * os.w + xx + left];
        }
      }
    }
  });
}

Var crop_spatial(Var x, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_single("crop_spatial", xv);
  const Shape s = xv.shape();
  if (top + height > s.h || left + width > s.w) throw ShapeError("crop_spatial: window outside " + s.str());
  Tensor out(Shape::chw(s.c, height, width));
  for (std::size_t c = 0; c < s.c; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t xx = 0; xx < width; ++xx) out.at(c, y, xx) = xv.at(c, y + top, xx + left);
    }
  }
  return tape.push(std::move(out), tape.needs_grad(x.id),
                   [x, s, top, left, height, width](Tape& t, std::span<const double> gy) {
                     auto gx = t.grad_buffer(x);
                     for (std::size_t c = 0; c < s.c; ++c) {
                       for (std::size_t y = 0; y < height; ++y) {
                         for (std::size_t xx = 0; xx < width; ++xx) {
                           gx[(c * s.h + y + top) * s.w + xx + left] += gy[(c * height + y) * width + xx];
                         }
                       }
                     }
                   });
}

Var flatten(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_single("flatten", xv);
  Tensor out = xv.reshaped(Shape::chw(xv.size(), 1, 1));
  return tape.push(std::move(out), tape.needs_grad(x.id),
                   [x](Tape& t, std::span<const double> gy) { accumulate(t, x, gy); });
}

// ---- reductions and losses -------------------------------------------------

Var sum(Var x) {
  Tape& tape = tape_of(x);
  Tensor out(Shape{}, x.value().sum());
  return tape.push(std::move(out), tape.needs_grad(x.id), [x](Tape& t, std::span<const double> gy) {
    auto gx = t.grad_buffer(x);
    for (double& g : gx) g += gy[0];
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

namespace {
constexpr double kProbClamp = 1e-12;
}

Var bce(Var probs, const Tensor& targets) {
  Tape& tape = tape_of(probs);
  const Tensor& p = probs.value();
  if (p.size() != targets.size()) {
    throw ShapeError("bce: " + std::to_string(p.size()) + " probabilities vs " + std::to_string(targets.size()) +
                     " targets");
  }
  const double n = static_cast<double>(p.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
    loss -= targets[i] * std::log(q) + (1.0 - targets[i]) * std::log(1.0 - q);
  }
  Tensor out(Shape{}, loss / n);
  return tape.push(std::move(out), tape.needs_grad(probs.id),
                   [probs, targets, n](Tape& t, std::span<const double> gy) {
                     auto gp = t.grad_buffer(probs);
                     const Tensor& pv = t.value(probs);
                     for (std::size_t i = 0; i < gp.size(); ++i) {
                       const double q = pv[i];
                       if (q <= kProbClamp || q >= 1.0 - kProbClamp) continue;
                       gp[i] += gy[0] * (-(targets[i] / q) + (1.0 - targets[i]) / (1.0 - q)) / n;
                     }
                   });
}

Var dice_loss(Var probs, const Tensor& truth) {
  Tape& tape = tape_of(probs);
  const Tensor& p = probs.value();
  if (p.size() != truth.size()) throw ShapeError("dice_loss: prediction and truth sizes differ");
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * truth[i];
    sp += p[i];
    sg += truth[i];
  }
  const double num = 2.0 * inter + 1.0;
  const double den = sp + sg + 1.0;
  Tensor out(Shape{}, 1.0 - num / den);
  return tape.push(std::move(out), tape.needs_grad(probs.id),
                   [probs, truth, num, den](Tape& t, std::span<const double> gy) {
                     auto gp = t.grad_buffer(probs);
                     for (std::size_t i = 0; i < gp.size(); ++i) {
                       gp[i] += gy[0] * -((2.0 * truth[i]) * den - num) / (den * den);
                     }
                   });
}

}  // namespace treeclstm
