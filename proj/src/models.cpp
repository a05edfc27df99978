#include "treeclstm/models.hpp"

#include <cmath>
#include <unordered_map>

namespace treeclstm {

namespace {

/// Binds each parameter to the tape at most once.
class Binder {
 public:
  Binder(Tape& tape, ParameterSet& params) : tape_(tape), params_(params) {}
  Var operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    Var v = tape_.param(params_.get(name));
    cache_.emplace(name, v);
    return v;
  }

 private:
  Tape& tape_;
  ParameterSet& params_;
  std::unordered_map<std::string, Var> cache_;
};

void add_conv(ParameterSet& params, const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
  params.add(name + ".w", Shape{out, in, k, k});
  params.add(name + ".b", Shape::chw(out, 1, 1));
}

void rescale_dense(Parameter& w, double gain) {
  const double fan_in = static_cast<double>(w.value.size() / w.value.shape().n);
  const double factor = std::sqrt(gain / fan_in) / kInitStddev;
  for (double& v : w.value.data()) v *= factor;
}

Var conv_layer(Binder& bind, const std::string& name, Var x, Padding padding = Padding::Same) {
  return add_channel_bias(conv2d(x, bind(name + ".w"), padding), bind(name + ".b"));
}

void check_frames(const TreeGraph& tree, std::span<const Tensor> frames, Shape want, const char* op) {
  if (frames.size() != tree.node_count()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(frames.size()) + " frames for " +
                     std::to_string(tree.node_count()) + " nodes");
  }
  for (std::size_t j = 0; j < frames.size(); ++j) {
    if (!(frames[j].shape() == want)) {
      throw ShapeError(std::string(op) + ": frame " + std::to_string(j) + " is " + frames[j].shape().str() +
                       ", expected " + want.str());
    }
  }
}

template <class T>
T enum_from(const std::string& s, std::initializer_list<std::pair<const char*, T>> table, const char* what) {
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  throw ConfigError(std::string("unknown ") + what + ": " + s);
}

}  // namespace

// ---- attention -------------------------------------------------------------

void add_attention_params(ParameterSet& params, const std::string& prefix, std::size_t channels,
                          std::size_t depth) {
  if (depth == 0) throw ConfigError("attention block depth must be >= 1");
  for (std::size_t i = 0; i < depth; ++i) add_conv(params, prefix + "." + std::to_string(i), channels, channels, 3);
}

Var attention_block(Tape& tape, ParameterSet& params, const std::string& prefix, Var f, std::size_t depth,
                    AttentionMaps* maps) {
  if (depth == 0) throw ConfigError("attention block depth must be >= 1");
  Binder bind(tape, params);
  Var x = f;
  for (std::size_t i = 0; i < depth; ++i) {
    x = conv_layer(bind, prefix + "." + std::to_string(i), x);
    if (i + 1 < depth) x = relu(x);
  }
  Var alpha = sigmoid(x);
  Var att = hadamard(alpha, f);
  Var out = concat_channels(f, att);
  if (maps != nullptr) *maps = AttentionMaps{f, x, alpha, att, out};
  return out;
}

// ---- classifiers -----------------------------------------------------------

std::string to_string(ClassifierVariant v) {
  switch (v) {
    case ClassifierVariant::Cnn: return "cnn";
    case ClassifierVariant::Clstm: return "clstm";
    case ClassifierVariant::TreeLstm: return "treelstm";
    case ClassifierVariant::TreeClstm: return "treeclstm";
  }
  return "?";
}

ClassifierVariant classifier_variant_from_string(const std::string& s) {
  return enum_from<ClassifierVariant>(s,
                                      {{"cnn", ClassifierVariant::Cnn},
                                       {"clstm", ClassifierVariant::Clstm},
                                       {"treelstm", ClassifierVariant::TreeLstm},
                                       {"treeclstm", ClassifierVariant::TreeClstm}},
                                      "classifier variant");
}

std::size_t ClassifierSpec::feature_size() const {
  // input pools -> valid conv5 -> pool -> valid conv5 -> pool -> valid conv3
  std::size_t s = frame_size;
  for (std::size_t i = 0; i < input_pool; ++i) {
    if (s % 2 != 0) s = 0;
    s /= 2;
  }
  if (s < 18 || (s - 4) % 2 != 0 || ((s - 4) / 2 - 4) % 2 != 0) {
    throw ConfigError("classifier frame size " + std::to_string(frame_size) + " with " + std::to_string(input_pool) +
                      " input pools does not fit the conv/pool stack");
  }
  return ((s - 4) / 2 - 4) / 2 - 2;
}

nlohmann::json ClassifierSpec::to_json() const {
  return {{"variant", to_string(variant)},         {"frame_size", frame_size},
          {"input_pool", input_pool},
          {"conv1_channels", conv1_channels},      {"conv2_channels", conv2_channels},
          {"conv3_channels", conv3_channels},      {"recurrent_hidden", recurrent_hidden},
          {"vector_hidden", vector_hidden},        {"cell_kernel", cell_kernel},
          {"dense_hidden", dense_hidden},          {"labels", labels}};
}

ClassifierSpec ClassifierSpec::from_json(const nlohmann::json& j) {
  ClassifierSpec s;
  if (j.contains("variant")) s.variant = classifier_variant_from_string(j.at("variant").get<std::string>());
  auto read = [&](const char* key, std::size_t& field) {
    if (j.contains(key)) field = j.at(key).get<std::size_t>();
  };
  read("frame_size", s.frame_size);
  read("input_pool", s.input_pool);
  read("conv1_channels", s.conv1_channels);
  read("conv2_channels", s.conv2_channels);
  read("conv3_channels", s.conv3_channels);
  read("recurrent_hidden", s.recurrent_hidden);
  read("vector_hidden", s.vector_hidden);
  read("cell_kernel", s.cell_kernel);
  read("dense_hidden", s.dense_hidden);
  read("labels", s.labels);
  return s;
}

Classifier build_classifier(const ClassifierSpec& spec, unsigned long long seed) {
  Classifier m{spec, {}};
  ParameterSet& p = m.params;
  const std::size_t fs = spec.feature_size();
  add_conv(p, "conv1", spec.conv1_channels, 1, 5);
  add_conv(p, "conv2", spec.conv2_channels, spec.conv1_channels, 5);
  add_conv(p, "conv3", spec.conv3_channels, spec.conv2_channels, 3);
  std::size_t dense_in = spec.conv3_channels * fs * fs;
  switch (spec.variant) {
    case ClassifierVariant::Cnn:
      break;
    case ClassifierVariant::Clstm:
    case ClassifierVariant::TreeClstm:
      CellWeights::create(p, "rnn", {spec.conv3_channels, spec.recurrent_hidden, spec.cell_kernel, true});
      dense_in = spec.recurrent_hidden * fs * fs;
      break;
    case ClassifierVariant::TreeLstm:
      CellWeights::create(p, "rnn", {dense_in, spec.vector_hidden, 1, false});
      dense_in = spec.vector_hidden;
      break;
  }
  add_conv(p, "fc1", spec.dense_hidden, dense_in, 1);
  add_conv(p, "fc2", spec.labels, spec.dense_hidden, 1);
  p.init_gaussian(seed, kInitStddev);
  // Dense layers: std sqrt(2 / fan_in) ahead of the ReLU, sqrt(1 / fan_in) at the output.
  // With 0.02 here the small desk models sit on the label prior for many epochs.
  rescale_dense(p.get("fc1.w"), 2.0);
  rescale_dense(p.get("fc2.w"), 1.0);
  return m;
}

std::vector<Var> classify_tree(Tape& tape, Classifier& model, const TreeGraph& tree,
                               std::span<const Tensor> frames) {
  const ClassifierSpec& spec = model.spec;
  check_frames(tree, frames, Shape::chw(1, spec.frame_size, spec.frame_size), "classify_tree");
  Binder bind(tape, model.params);
  const std::size_t n = tree.node_count();
  std::vector<Var> feats(n);
  for (NodeId j = 0; j < n; ++j) {
    Var x = tape.constant(frames[j]);
    for (std::size_t i = 0; i < spec.input_pool; ++i) x = maxpool2(x);
    x = maxpool2(relu(conv_layer(bind, "conv1", x, Padding::Valid)));
    x = maxpool2(relu(conv_layer(bind, "conv2", x, Padding::Valid)));
    feats[j] = relu(conv_layer(bind, "conv3", x, Padding::Valid));
  }
  std::vector<Var> rec = feats;
  if (spec.variant != ClassifierVariant::Cnn) {
    const bool vector = spec.variant == ClassifierVariant::TreeLstm;
    CellConfig cfg = vector ? CellConfig{feats[0].value().size(), spec.vector_hidden, 1, false}
                            : CellConfig{spec.conv3_channels, spec.recurrent_hidden, spec.cell_kernel, true};
    BoundCell cell = bind_cell(tape, model.params, CellWeights{"rnn", cfg});
    if (vector) {
      for (Var& v : rec) v = flatten(v);
    }
    std::vector<CellState> states = spec.variant == ClassifierVariant::Clstm
                                         ? run_sequential(cell, tree, rec, SequentialMode::PerChainLeafToRoot)
                                         : run_tree(cell, tree, rec);
    for (NodeId j = 0; j < n; ++j) rec[j] = states[j].h;
  }
  std::vector<Var> out(n);
  for (NodeId j = 0; j < n; ++j) {
    Var h = relu(conv_layer(bind, "fc1", flatten(rec[j])));
    out[j] = sigmoid(conv_layer(bind, "fc2", h));
  }
  return out;
}

// ---- segmentation ----------------------------------------------------------

std::string to_string(Recurrence r) {
  switch (r) {
    case Recurrence::None: return "none";
    case Recurrence::Sequential: return "sequential";
    case Recurrence::Tree: return "tree";
  }
  return "?";
}

std::string to_string(RecurrentSite s) {
  switch (s) {
    case RecurrentSite::Bottleneck: return "bottleneck";
    case RecurrentSite::Conv3_2: return "conv3_2";
    case RecurrentSite::Conv4_2: return "conv4_2";
  }
  return "?";
}

namespace {

/// Decoder level whose output hosts the recurrent layer, or -1 for the
/// bottleneck.
int site_level(RecurrentSite s) {
  switch (s) {
    case RecurrentSite::Bottleneck: return -1;
    case RecurrentSite::Conv3_2: return 0;
    case RecurrentSite::Conv4_2: return 1;
  }
  return -1;
}

std::size_t after_recurrent(const SegNetSpec& s, std::size_t channels) {
  if (s.recurrence == Recurrence::None) return channels;
  return s.attention ? 2 * s.recurrent_hidden : s.recurrent_hidden;
}

bool skip_attention_at(const SegNetSpec& s, std::size_t level) {
  const bool recurrent_here = s.recurrence != Recurrence::None && site_level(s.site) == static_cast<int>(level);
  return s.attention && level == 0 && !recurrent_here;
}

}  // namespace

void SegNetSpec::validate() const {
  if (widths.size() < 2) throw ConfigError("segmentation net needs at least 2 levels");
  const std::size_t scale = std::size_t{1} << (widths.size() - 1);
  if (padded_size % scale != 0) {
    throw ConfigError("padded size " + std::to_string(padded_size) + " not divisible by " + std::to_string(scale));
  }
  if (padded_size < frame_size) throw ConfigError("padded size smaller than frame size");
  if (site_level(site) >= static_cast<int>(widths.size()) - 1) {
    throw ConfigError("recurrent site " + to_string(site) + " needs a deeper decoder");
  }
  if (recurrence != Recurrence::None && (recurrent_hidden == 0 || cell_kernel % 2 == 0)) {
    throw ConfigError("invalid recurrent layer configuration");
  }
}

nlohmann::json SegNetSpec::to_json() const {
  return {{"recurrence", to_string(recurrence)},
          {"attention", attention},
          {"site", to_string(site)},
          {"sequential_mode", sequential_mode == SequentialMode::RootToLeaf ? "root_to_leaf" : "per_chain"},
          {"widths", widths},
          {"in_channels", in_channels},
          {"frame_size", frame_size},
          {"padded_size", padded_size},
          {"recurrent_hidden", recurrent_hidden},
          {"cell_kernel", cell_kernel},
          {"recurrent_attention_depth", recurrent_attention_depth},
          {"skip_attention_depth", skip_attention_depth}};
}

SegNetSpec SegNetSpec::from_json(const nlohmann::json& j) {
  SegNetSpec s;
  if (j.contains("recurrence")) {
    s.recurrence = enum_from<Recurrence>(
        j.at("recurrence").get<std::string>(),
        {{"none", Recurrence::None}, {"sequential", Recurrence::Sequential}, {"tree", Recurrence::Tree}},
        "recurrence");
  }
  if (j.contains("attention")) s.attention = j.at("attention").get<bool>();
  if (j.contains("site")) {
    s.site = enum_from<RecurrentSite>(j.at("site").get<std::string>(),
                                      {{"bottleneck", RecurrentSite::Bottleneck},
                                       {"conv3_2", RecurrentSite::Conv3_2},
                                       {"conv4_2", RecurrentSite::Conv4_2}},
                                      "recurrent site");
  }
  if (j.contains("sequential_mode")) {
    s.sequential_mode = enum_from<SequentialMode>(
        j.at("sequential_mode").get<std::string>(),
        {{"root_to_leaf", SequentialMode::RootToLeaf}, {"per_chain", SequentialMode::PerChainLeafToRoot}},
        "sequential mode");
  }
  if (j.contains("widths")) s.widths = j.at("widths").get<std::vector<std::size_t>>();
  auto read = [&](const char* key, std::size_t& field) {
    if (j.contains(key)) field = j.at(key).get<std::size_t>();
  };
  read("in_channels", s.in_channels);
  read("frame_size", s.frame_size);
  read("padded_size", s.padded_size);
  read("recurrent_hidden", s.recurrent_hidden);
  read("cell_kernel", s.cell_kernel);
  read("recurrent_attention_depth", s.recurrent_attention_depth);
  read("skip_attention_depth", s.skip_attention_depth);
  s.validate();
  return s;
}

SegNet build_segnet(const SegNetSpec& spec, unsigned long long seed) {
  spec.validate();
  SegNet m{spec, {}};
  ParameterSet& p = m.params;
  const auto& w = spec.widths;
  const std::size_t levels = w.size();
  std::size_t ch = spec.in_channels;
  for (std::size_t l = 0; l < levels; ++l) {
    add_conv(p, "enc" + std::to_string(l) + "_1", w[l], ch, 3);
    add_conv(p, "enc" + std::to_string(l) + "_2", w[l], w[l], 3);
    ch = w[l];
  }
  auto add_recurrent = [&](std::size_t in) {
    if (spec.recurrence == Recurrence::None) return in;
    CellWeights::create(p, "rnn", {in, spec.recurrent_hidden, spec.cell_kernel, true});
    if (spec.attention) add_attention_params(p, "att_rec", spec.recurrent_hidden, spec.recurrent_attention_depth);
    return after_recurrent(spec, in);
  };
  if (site_level(spec.site) < 0) ch = add_recurrent(ch);
  for (std::size_t k = 0; k + 1 < levels; ++k) {
    const std::size_t d = levels - 2 - k;
    const std::string name = "conv" + std::to_string(3 + k);
    p.add("up" + std::to_string(k) + ".w", Shape{w[d], ch, 2, 2});
    add_conv(p, name + "_1", w[d], 2 * w[d], 3);
    add_conv(p, name + "_2", w[d], w[d], 3);
    ch = w[d];
    if (site_level(spec.site) == static_cast<int>(k)) ch = add_recurrent(ch);
    if (skip_attention_at(spec, k)) {
      add_attention_params(p, "att_skip", ch, spec.skip_attention_depth);
      ch *= 2;
    }
  }
  add_conv(p, "head", 1, ch, 1);
  p.init_gaussian(seed, kInitStddev);
  return m;
}

std::vector<Var> seg_forward(Tape& tape, SegNet& model, const TreeGraph& tree, std::span<const Tensor> frames) {
  const SegNetSpec& spec = model.spec;
  check_frames(tree, frames, Shape::chw(spec.in_channels, spec.frame_size, spec.frame_size), "seg_forward");
  Binder bind(tape, model.params);
  const std::size_t n = tree.node_count();
  const std::size_t levels = spec.widths.size();
  const std::size_t pad_lo = (spec.padded_size - spec.frame_size) / 2;
  const std::size_t pad_hi = spec.padded_size - spec.frame_size - pad_lo;

  std::vector<Var> xs(n);
  std::vector<std::vector<Var>> skips(levels - 1, std::vector<Var>(n));
  for (NodeId j = 0; j < n; ++j) {
    Var x = pad_spatial(tape.constant(frames[j]), pad_lo, pad_lo, pad_hi, pad_hi);
    for (std::size_t l = 0; l < levels; ++l) {
      x = relu(conv_layer(bind, "enc" + std::to_string(l) + "_1", x));
      x = relu(conv_layer(bind, "enc" + std::to_string(l) + "_2", x));
      if (l + 1 < levels) {
        skips[l][j] = x;
        x = maxpool2(x);
      }
    }
    xs[j] = x;
  }

  auto apply_recurrent = [&] {
    if (spec.recurrence == Recurrence::None) return;
    const std::size_t in = xs[0].shape().c;
    BoundCell cell = bind_cell(tape, model.params, CellWeights{"rnn", {in, spec.recurrent_hidden, spec.cell_kernel, true}});
    std::vector<CellState> states = spec.recurrence == Recurrence::Tree
                                         ? run_tree(cell, tree, xs)
                                         : run_sequential(cell, tree, xs, spec.sequential_mode);
    for (NodeId j = 0; j < n; ++j) {
      xs[j] = states[j].h;
      if (spec.attention) {
        xs[j] = attention_block(tape, model.params, "att_rec", xs[j], spec.recurrent_attention_depth);
      }
    }
  };

  if (site_level(spec.site) < 0) apply_recurrent();
  for (std::size_t k = 0; k + 1 < levels; ++k) {
    const std::size_t d = levels - 2 - k;
    const std::string name = "conv" + std::to_string(3 + k);
    for (NodeId j = 0; j < n; ++j) {
      Var x = upconv2(xs[j], bind("up" + std::to_string(k) + ".w"));
      x = concat_channels(x, skips[d][j]);
      x = relu(conv_layer(bind, name + "_1", x));
      xs[j] = relu(conv_layer(bind, name + "_2", x));
    }
    if (site_level(spec.site) == static_cast<int>(k)) apply_recurrent();
    if (skip_attention_at(spec, k)) {
      for (NodeId j = 0; j < n; ++j) {
        xs[j] = attention_block(tape, model.params, "att_skip", xs[j], spec.skip_attention_depth);
      }
    }
  }
  std::vector<Var> out(n);
  for (NodeId j = 0; j < n; ++j) {
    Var logits = conv_layer(bind, "head", xs[j]);
    out[j] = crop_spatial(sigmoid(logits), pad_lo, pad_lo, spec.frame_size, spec.frame_size);
  }
  return out;
}

}  // namespace treeclstm
