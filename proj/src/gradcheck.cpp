#include "treeclstm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "treeclstm/errors.hpp"
#include "treeclstm/models.hpp"

namespace treeclstm {

bool GradCheckReport::passed() const {
  return std::all_of(groups.begin(), groups.end(), [](const GradGroupResult& g) { return g.passed; });
}

std::vector<std::string> GradCheckReport::failing() const {
  std::vector<std::string> out;
  for (const auto& g : groups) {
    if (!g.passed) out.push_back(g.name);
  }
  return out;
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& g : groups) m = std::max(m, g.max_rel_error);
  return m;
}

GradCheckReport check_gradients(ParameterSet& params, const LossFn& loss, const GradCheckOptions& options) {
  params.zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape, params));
  }
  auto eval = [&] {
    Tape tape;
    return loss(tape, params).value()[0];
  };

  GradCheckReport report;
  report.threshold = options.threshold;
  std::mt19937_64 rng(options.seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Parameter& param = params[p];
    std::vector<std::size_t> idx(param.value.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (options.max_elements > 0 && idx.size() > options.max_elements) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(options.max_elements);
      std::sort(idx.begin(), idx.end());
    }
    GradGroupResult group{param.name, idx.size(), 0.0, 0.0, true};
    for (std::size_t i : idx) {
      const double saved = param.value[i];
      param.value[i] = saved + options.step;
      const double up = eval();
      param.value[i] = saved - options.step;
      const double down = eval();
      param.value[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double analytic = param.grad[i];
      const double abs_err = std::abs(analytic - numeric);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
      group.max_abs_error = std::max(group.max_abs_error, abs_err);
      group.max_rel_error = std::max(group.max_rel_error, abs_err / denom);
    }
    group.passed = group.max_rel_error < options.threshold;
    report.groups.push_back(group);
  }
  params.zero_grad();
  return report;
}

std::string to_string(GradTarget t) {
  switch (t) {
    case GradTarget::Lstm: return "lstm";
    case GradTarget::ConvLstm: return "convlstm";
    case GradTarget::TreeLstm: return "treelstm";
    case GradTarget::TreeClstm: return "treeclstm";
    case GradTarget::Attention: return "attention";
    case GradTarget::SegNet: return "segnet";
  }
  return "?";
}

GradTarget grad_target_from_string(const std::string& s) {
  for (GradTarget t : {GradTarget::Lstm, GradTarget::ConvLstm, GradTarget::TreeLstm, GradTarget::TreeClstm,
                       GradTarget::Attention, GradTarget::SegNet}) {
    if (to_string(t) == s) return t;
  }
  throw ConfigError("unknown gradcheck target: " + s);
}

double default_threshold(GradTarget t) { return t == GradTarget::SegNet ? 1e-4 : 1e-5; }

namespace {

void fill_uniform(Tensor& t, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
}

// Balanced binary tree with 7 nodes, root 0.
TreeGraph seven_node_tree() { return TreeGraph(0, {{1, 2}, {3, 4}, {5, 6}, {}, {}, {}, {}}); }

std::vector<Var> bind_inputs(Tape& tape, ParameterSet& params, std::size_t n) {
  std::vector<Var> xs;
  for (std::size_t j = 0; j < n; ++j) xs.push_back(tape.param(params.get("x." + std::to_string(j))));
  return xs;
}

Var probe(Var h, const Tensor& r) {
  Tape& tape = *h.tape;
  return sum(hadamard(h, tape.constant(r)));
}

GradCheckReport check_cell(bool spatial, bool tree_cell, std::mt19937_64& rng, const GradCheckOptions& opt) {
  const CellConfig cfg = spatial ? CellConfig{2, 2, 3, true} : CellConfig{3, 2, 1, false};
  const Shape in_shape = spatial ? Shape::chw(2, 6, 6) : Shape::chw(3, 1, 1);
  const Shape h_shape = spatial ? Shape::chw(2, 6, 6) : Shape::chw(2, 1, 1);
  ParameterSet params;
  CellWeights weights = CellWeights::create(params, "cell", cfg);
  const TreeGraph tree = tree_cell ? seven_node_tree() : TreeGraph::chain(4);
  for (std::size_t j = 0; j < tree.node_count(); ++j) params.add("x." + std::to_string(j), in_shape);
  for (std::size_t p = 0; p < params.size(); ++p) fill_uniform(params[p].value, rng, -0.5, 0.5);
  Tensor r(h_shape);
  fill_uniform(r, rng, -1.0, 1.0);
  auto loss = [&](Tape& tape, ParameterSet& ps) {
    BoundCell cell = bind_cell(tape, ps, weights);
    std::vector<Var> xs = bind_inputs(tape, ps, tree.node_count());
    std::vector<CellState> states;
    if (tree_cell) {
      states = run_tree(cell, tree, xs);
    } else {
      // Leaf (node 3) to root with the sequential update.
      states.resize(tree.node_count());
      CellState s = zero_state(tape, cell, h_shape.h, h_shape.w);
      for (std::size_t j = tree.node_count(); j-- > 0;) {
        s = spatial ? convlstm_step(cell, xs[j], s) : lstm_step(cell, xs[j], s);
        states[j] = s;
      }
    }
    return add(probe(states[tree.root()].h, r), probe(states[tree.root()].c, r));
  };
  return check_gradients(params, loss, opt);
}

}  // namespace

GradCheckReport run_gradcheck(GradTarget target, unsigned long long seed) {
  std::mt19937_64 rng(seed);
  GradCheckOptions opt;
  opt.threshold = default_threshold(target);
  opt.seed = seed;
  switch (target) {
    case GradTarget::Lstm: return check_cell(false, false, rng, opt);
    case GradTarget::ConvLstm: return check_cell(true, false, rng, opt);
    case GradTarget::TreeLstm: return check_cell(false, true, rng, opt);
    case GradTarget::TreeClstm: return check_cell(true, true, rng, opt);
    case GradTarget::Attention: {
      ParameterSet params;
      add_attention_params(params, "att", 2, 3);
      params.add("x.0", Shape::chw(2, 6, 6));
      for (std::size_t p = 0; p < params.size(); ++p) fill_uniform(params[p].value, rng, -0.5, 0.5);
      Tensor r(Shape::chw(4, 6, 6));
      fill_uniform(r, rng, -1.0, 1.0);
      auto loss = [&](Tape& tape, ParameterSet& ps) {
        Var x = tape.param(ps.get("x.0"));
        return probe(attention_block(tape, ps, "att", x, 3), r);
      };
      return check_gradients(params, loss, opt);
    }
    case GradTarget::SegNet: {
      SegNetSpec spec;
      spec.widths = {4, 4};
      spec.frame_size = 8;
      spec.padded_size = 8;
      spec.recurrent_hidden = 2;
      spec.site = RecurrentSite::Conv3_2;
      SegNet net = build_segnet(spec, seed);
      for (std::size_t p = 0; p < net.params.size(); ++p) fill_uniform(net.params[p].value, rng, -0.5, 0.5);
      const TreeGraph tree(0, {{1, 2}, {}, {}});
      std::vector<Tensor> frames(3, Tensor(Shape::chw(spec.in_channels, 8, 8)));
      std::vector<Tensor> truth(3, Tensor(Shape::chw(1, 8, 8)));
      std::bernoulli_distribution coin(0.5);
      for (std::size_t j = 0; j < 3; ++j) {
        fill_uniform(frames[j], rng, 0.0, 1.0);
        for (double& v : truth[j].data()) v = coin(rng) ? 1.0 : 0.0;
      }
      auto loss = [&](Tape& tape, ParameterSet&) {
        std::vector<Var> out = seg_forward(tape, net, tree, frames);
        std::vector<Var> terms;
        for (std::size_t j = 0; j < out.size(); ++j) terms.push_back(bce(out[j], truth[j]));
        return add_n(terms);
      };
      return check_gradients(net.params, loss, opt);
    }
  }
  throw ConfigError("unknown gradcheck target");
}

}  // namespace treeclstm
