#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "treeclstm/autograd.hpp"

namespace treeclstm {

struct GradCheckOptions {
  double step = 1e-5;
  double threshold = 1e-5;
  /// Denominator floor of the relative error, so entries whose true
  /// derivative is ~0 are compared on an absolute scale.
  double floor = 1e-6;
  /// Elements probed per parameter; 0 checks every element.
  std::size_t max_elements = 0;
  unsigned long long seed = 0;
};

struct GradGroupResult {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradGroupResult> groups;
  double threshold = 0.0;
  bool passed() const;
  std::vector<std::string> failing() const;
  double max_rel_error() const;
};

/// Builds a scalar loss on a fresh tape from the current parameter values.
using LossFn = std::function<Var(Tape&, ParameterSet&)>;

/// Compares reverse-mode gradients of every parameter against central finite
/// differences. The relative error of one element is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
GradCheckReport check_gradients(ParameterSet& params, const LossFn& loss, const GradCheckOptions& options);

/// Built-in check problems: each cell on a small tree (at most 7 nodes,
/// tensors at most 2x6x6), one attention block, and a tiny segmentation net.
enum class GradTarget { Lstm, ConvLstm, TreeLstm, TreeClstm, Attention, SegNet };

std::string to_string(GradTarget t);
GradTarget grad_target_from_string(const std::string& s);
/// 1e-5 for cells and the attention block, 1e-4 for the full network.
double default_threshold(GradTarget t);

/// Random weights and inputs from `seed`; inputs are checked as parameters
/// ("x.<node>") alongside the weights.
GradCheckReport run_gradcheck(GradTarget target, unsigned long long seed);

}  // namespace treeclstm
