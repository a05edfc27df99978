#pragma once

// Recurrent cells: vector LSTM, sequential ConvLSTM, child-sum tree LSTM and
// the tree-structured ConvLSTM.
//
// All four share one gate layout. A vector cell is the 1x1-kernel special
// case operating on (d, 1, 1) tensors, so its W/U "matrices" are kernels of
// shape (out, in, 1, 1). Biases are zero.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "treeclstm/autograd.hpp"
#include "treeclstm/treegraph.hpp"

namespace treeclstm {

struct CellConfig {
  std::size_t input_channels = 1;
  std::size_t hidden_channels = 32;
  /// Odd; 1 for vector cells.
  std::size_t kernel_size = 3;
  /// False for the vector (fully-connected) cells: inputs must be (d, 1, 1).
  bool spatial = true;
};

/// Names and shapes of the eight gate weights W_{i,f,o,m} and U_{i,f,o,m}.
/// Values live in a ParameterSet under "<prefix>.W_i" etc.
struct CellWeights {
  std::string prefix;
  CellConfig config;

  /// Registers the eight parameters (recurrent group) in `params`.
  static CellWeights create(ParameterSet& params, std::string prefix, CellConfig config);
  std::vector<std::string> parameter_names() const;
};

/// Cell weights bound to one tape, with gate kernels pre-stacked.
struct BoundCell {
  CellConfig config;
  Var w_i, w_f, w_o, w_m;
  Var u_i, u_f, u_o, u_m;
  /// [W_i; W_f; W_o; W_m] along the output axis.
  Var w_all;
  /// [U_i; U_f; U_o; U_m].
  Var u_all;
  /// [U_i; U_o; U_m] applied to the child-sum hidden state.
  Var u_iom;
};

BoundCell bind_cell(Tape& tape, ParameterSet& params, const CellWeights& weights);

struct CellState {
  Var h;
  Var c;
};

struct GateActivations {
  Var i;
  std::vector<Var> f;
  Var o;
  Var m;
};

/// One LSTM step on (d, 1, 1) vectors.
CellState lstm_step(const BoundCell& cell, Var x, const CellState& prev, GateActivations* gates = nullptr);
/// One ConvLSTM step; spatial dims of x and prev must agree.
CellState convlstm_step(const BoundCell& cell, Var x, const CellState& prev, GateActivations* gates = nullptr);
/// Tree-structured ConvLSTM node update from any number of children. An
/// empty child list is a leaf: child sums are zero.
CellState tree_convlstm_step(const BoundCell& cell, Var x, std::span<const CellState> children,
                             GateActivations* gates = nullptr);
/// Child-sum tree LSTM on (d, 1, 1) vectors.
CellState tree_lstm_step(const BoundCell& cell, Var x, std::span<const CellState> children,
                         GateActivations* gates = nullptr);

/// Zero (H, C) pair sized for `cell` at the given spatial extent.
CellState zero_state(Tape& tape, const BoundCell& cell, std::size_t height, std::size_t width);

/// Evaluates a tree cell leaf to root over `tree`; inputs are indexed by
/// node id. Returns states indexed by node id.
std::vector<CellState> run_tree(const BoundCell& cell, const TreeGraph& tree, std::span<const Var> inputs);

enum class SequentialMode {
  /// Every maximal chain is an independent sequence, run bottom to top from
  /// a zero state.
  PerChainLeafToRoot,
  /// Each node continues from its parent's state, starting at the root.
  RootToLeaf,
};

/// Sequential (single-predecessor) cell over a tree.
std::vector<CellState> run_sequential(const BoundCell& cell, const TreeGraph& tree, std::span<const Var> inputs,
                                      SequentialMode mode);

}  // namespace treeclstm
