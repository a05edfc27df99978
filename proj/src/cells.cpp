#include "treeclstm/cells.hpp"

#include <array>

namespace treeclstm {

namespace {

constexpr std::array<const char*, 8> kGateNames{"W_i", "U_i", "W_f", "U_f", "W_o", "U_o", "W_m", "U_m"};

void check_input(const BoundCell& cell, Var x, const char* op) {
  const Shape s = x.shape();
  if (s.n != 1 || s.c != cell.config.input_channels) {
    throw ShapeError(std::string(op) + ": input " + s.str() + " does not have " +
                     std::to_string(cell.config.input_channels) + " channels");
  }
  if (!cell.config.spatial && (s.h != 1 || s.w != 1)) {
    throw ShapeError(std::string(op) + ": vector cell expects (d, 1, 1) input, got " + s.str());
  }
}

void check_state(const BoundCell& cell, Var x, const CellState& st, const char* op) {
  const Shape h = st.h.shape();
  if (!(h == st.c.shape())) throw ShapeError(std::string(op) + ": H and C shapes differ");
  if (h.c != cell.config.hidden_channels || h.h != x.shape().h || h.w != x.shape().w) {
    throw ShapeError(std::string(op) + ": state " + h.str() + " incompatible with input " + x.shape().str() +
                     " and " + std::to_string(cell.config.hidden_channels) + " hidden channels");
  }
}

CellState sequential_step(const BoundCell& cell, Var x, const CellState& prev, GateActivations* gates,
                          const char* op) {
  check_input(cell, x, op);
  check_state(cell, x, prev, op);
  const std::size_t hc = cell.config.hidden_channels;
  Var pre = add(conv2d(x, cell.w_all), conv2d(prev.h, cell.u_all));
  Var i = sigmoid(slice_channels(pre, 0, hc));
  Var f = sigmoid(slice_channels(pre, hc, hc));
  Var o = sigmoid(slice_channels(pre, 2 * hc, hc));
  Var m = tanh(slice_channels(pre, 3 * hc, hc));
  Var c = add(hadamard(f, prev.c), hadamard(i, m));
  Var h = hadamard(o, tanh(c));
  if (gates != nullptr) *gates = GateActivations{i, {f}, o, m};
  return {h, c};
}

CellState tree_step(const BoundCell& cell, Var x, std::span<const CellState> children, GateActivations* gates,
                    const char* op) {
  check_input(cell, x, op);
  for (const CellState& ch : children) {
    check_state(cell, x, ch, op);
  }
  const std::size_t hc = cell.config.hidden_channels;
  Var gx = conv2d(x, cell.w_all);
  Var pre_i = slice_channels(gx, 0, hc);
  Var pre_f = slice_channels(gx, hc, hc);
  Var pre_o = slice_channels(gx, 2 * hc, hc);
  Var pre_m = slice_channels(gx, 3 * hc, hc);
  std::vector<Var> fs;
  std::vector<Var> memory_terms;
  if (!children.empty()) {
    std::vector<Var> hs;
    hs.reserve(children.size());
    for (const CellState& ch : children) hs.push_back(ch.h);
    Var h_sum = hs.size() == 1 ? hs.front() : add_n(hs);
    Var gh = conv2d(h_sum, cell.u_iom);
    pre_i = add(pre_i, slice_channels(gh, 0, hc));
    pre_o = add(pre_o, slice_channels(gh, hc, hc));
    pre_m = add(pre_m, slice_channels(gh, 2 * hc, hc));
    for (const CellState& ch : children) {
      Var f = sigmoid(add(pre_f, conv2d(ch.h, cell.u_f)));
      fs.push_back(f);
      memory_terms.push_back(hadamard(f, ch.c));
    }
  }
  Var i = sigmoid(pre_i);
  Var o = sigmoid(pre_o);
  Var m = tanh(pre_m);
  memory_terms.push_back(hadamard(i, m));
  Var c = memory_terms.size() == 1 ? memory_terms.front() : add_n(memory_terms);
  Var h = hadamard(o, tanh(c));
  if (gates != nullptr) *gates = GateActivations{i, std::move(fs), o, m};
  return {h, c};
}

}  // namespace

CellWeights CellWeights::create(ParameterSet& params, std::string prefix, CellConfig config) {
  if (config.kernel_size % 2 == 0) throw ConfigError("cell kernel size must be odd");
  if (!config.spatial && config.kernel_size != 1) throw ConfigError("vector cells use 1x1 weights");
  if (config.hidden_channels == 0 || config.input_channels == 0) throw ConfigError("cell channels must be positive");
  CellWeights w{std::move(prefix), config};
  const std::size_t k = config.kernel_size;
  for (const char* name : kGateNames) {
    const std::size_t in = name[0] == 'W' ? config.input_channels : config.hidden_channels;
    params.add(w.prefix + "." + name, Shape{config.hidden_channels, in, k, k}, true);
  }
  return w;
}

std::vector<std::string> CellWeights::parameter_names() const {
  std::vector<std::string> out;
  for (const char* name : kGateNames) out.push_back(prefix + "." + name);
  return out;
}

BoundCell bind_cell(Tape& tape, ParameterSet& params, const CellWeights& weights) {
  auto p = [&](const char* gate) { return tape.param(params.get(weights.prefix + "." + gate)); };
  BoundCell b;
  b.config = weights.config;
  b.w_i = p("W_i");
  b.u_i = p("U_i");
  b.w_f = p("W_f");
  b.u_f = p("U_f");
  b.w_o = p("W_o");
  b.u_o = p("U_o");
  b.w_m = p("W_m");
  b.u_m = p("U_m");
  const std::array<Var, 4> ws{b.w_i, b.w_f, b.w_o, b.w_m};
  const std::array<Var, 4> us{b.u_i, b.u_f, b.u_o, b.u_m};
  const std::array<Var, 3> uiom{b.u_i, b.u_o, b.u_m};
  b.w_all = stack_kernels(ws);
  b.u_all = stack_kernels(us);
  b.u_iom = stack_kernels(uiom);
  return b;
}

CellState lstm_step(const BoundCell& cell, Var x, const CellState& prev, GateActivations* gates) {
  if (cell.config.spatial) throw ConfigError("lstm_step needs a vector cell");
  return sequential_step(cell, x, prev, gates, "lstm_step");
}

CellState convlstm_step(const BoundCell& cell, Var x, const CellState& prev, GateActivations* gates) {
  if (!cell.config.spatial) throw ConfigError("convlstm_step needs a convolutional cell");
  return sequential_step(cell, x, prev, gates, "convlstm_step");
}

CellState tree_convlstm_step(const BoundCell& cell, Var x, std::span<const CellState> children,
                             GateActivations* gates) {
  if (!cell.config.spatial) throw ConfigError("tree_convlstm_step needs a convolutional cell");
  return tree_step(cell, x, children, gates, "tree_convlstm_step");
}

CellState tree_lstm_step(const BoundCell& cell, Var x, std::span<const CellState> children,
                         GateActivations* gates) {
  if (cell.config.spatial) throw ConfigError("tree_lstm_step needs a vector cell");
  return tree_step(cell, x, children, gates, "tree_lstm_step");
}

CellState zero_state(Tape& tape, const BoundCell& cell, std::size_t height, std::size_t width) {
  const Shape s = Shape::chw(cell.config.hidden_channels, height, width);
  return {tape.constant(Tensor(s)), tape.constant(Tensor(s))};
}

std::vector<CellState> run_tree(const BoundCell& cell, const TreeGraph& tree, std::span<const Var> inputs) {
  if (inputs.size() != tree.node_count()) {
    throw ShapeError("run_tree: " + std::to_string(inputs.size()) + " inputs for " +
                     std::to_string(tree.node_count()) + " nodes");
  }
  std::vector<CellState> states(tree.node_count());
  std::vector<CellState> kids;
  for (NodeId j : topological_schedule(tree)) {
    kids.clear();
    for (NodeId c : tree.children(j)) kids.push_back(states[c]);
    states[j] = tree_step(cell, inputs[j], kids, nullptr, "run_tree");
  }
  return states;
}

std::vector<CellState> run_sequential(const BoundCell& cell, const TreeGraph& tree, std::span<const Var> inputs,
                                      SequentialMode mode) {
  if (inputs.size() != tree.node_count()) {
    throw ShapeError("run_sequential: " + std::to_string(inputs.size()) + " inputs for " +
                     std::to_string(tree.node_count()) + " nodes");
  }
  std::vector<CellState> states(tree.node_count());
  // A zero previous state is exactly the leaf case of the tree update.
  auto start = [&](NodeId j) { states[j] = tree_step(cell, inputs[j], {}, nullptr, "run_sequential"); };
  auto step = [&](NodeId j, NodeId from) {
    states[j] = sequential_step(cell, inputs[j], states[from], nullptr, "run_sequential");
  };
  if (mode == SequentialMode::PerChainLeafToRoot) {
    for (const auto& chain : branch_decompose(tree)) {
      start(chain.back());
      for (std::size_t k = chain.size() - 1; k-- > 0;) step(chain[k], chain[k + 1]);
    }
  } else {
    auto order = topological_schedule(tree);
    start(order.back());
    for (std::size_t k = order.size() - 1; k-- > 0;) step(order[k], *tree.parent(order[k]));
  }
  return states;
}

}  // namespace treeclstm
