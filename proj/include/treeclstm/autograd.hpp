#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// A Tape owns every intermediate value of one forward pass. Ops append a node
// holding the output value and a closure that pushes the output gradient back
// to the op inputs. backward() walks the nodes in reverse insertion order, so
// each node is visited once and only after all of its consumers.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "treeclstm/tensor.hpp"

namespace treeclstm {

/// A trainable tensor that outlives tapes. Gradients from every tape the
/// parameter was bound to accumulate into `grad` until zero_grad().
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  /// Member of the recurrent-layer group (gradient clipping scope).
  bool recurrent = false;
};

/// Ordered collection of parameters with stable addresses.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter& add(const std::string& name, Shape shape, bool recurrent = false);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  const Parameter* find(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();
  /// Fills every non-bias value from N(0, stddev^2); biases (names ending in
  /// ".b") are set to zero.
  void init_gaussian(unsigned long long seed, double stddev);

  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::span<const double>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  Var param(Parameter& p);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].needs_grad; }
  /// Gradient of the last backward() target with respect to v (zeros if v
  /// did not influence it).
  Tensor grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and propagates. Resets gradients left over
  /// from a previous call on this tape, then adds the fresh parameter
  /// gradients into Parameter::grad.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  // Op plumbing.
  Var push(Tensor value, bool needs_grad, Backward fn);
  /// Mutable gradient buffer of v, zero-initialized on first use.
  std::span<double> grad_buffer(Var v);
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool needs_grad = false;
    Backward backward;
    Parameter* param = nullptr;
  };
  std::vector<Node> nodes_;
};

enum class Padding { Same, Valid };

// ---- ops -----------------------------------------------------------------

/// 2-D cross-correlation. `kernel` has shape (out, in, kh, kw); `same`
/// padding zero-pads by kh/2, kw/2 and requires odd kernel sizes.
Var conv2d(Var input, Var kernel, Padding padding = Padding::Same);
/// Adds a per-channel bias of shape (1, C, 1, 1).
Var add_channel_bias(Var x, Var bias);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
/// Sum of equally shaped tensors; the list must be non-empty.
Var add_n(std::span<const Var> xs);

Var sigmoid(Var x);
Var tanh(Var x);
Var relu(Var x);

/// 2x2 max pooling with stride 2; spatial dims must be even.
Var maxpool2(Var x);
/// 2x2 stride-2 transposed convolution; kernel shape (out, in, 2, 2).
Var upconv2(Var x, Var kernel);

/// Channel concatenation of two n == 1 tensors; `a` occupies the first block.
Var concat_channels(Var a, Var b);
Var slice_channels(Var x, std::size_t begin, std::size_t count);
/// Concatenates kernels along the output (n) axis.
Var stack_kernels(std::span<const Var> kernels);

Var pad_spatial(Var x, std::size_t top, std::size_t left, std::size_t bottom, std::size_t right);
Var crop_spatial(Var x, std::size_t top, std::size_t left, std::size_t height, std::size_t width);
/// (1, C, H, W) -> (1, C*H*W, 1, 1).
Var flatten(Var x);

Var sum(Var x);
Var mean(Var x);

/// Mean binary cross-entropy of probabilities against 0/1 targets;
/// probabilities are clamped to [1e-12, 1 - 1e-12].
Var bce(Var probs, const Tensor& targets);
/// 1 - (2 sum(p g) + 1) / (sum(p) + sum(g) + 1).
Var dice_loss(Var probs, const Tensor& truth);

}  // namespace treeclstm
