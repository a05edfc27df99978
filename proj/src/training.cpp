#include "treeclstm/training.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "treeclstm/errors.hpp"

namespace treeclstm {

namespace fs = std::filesystem;

// ---- config ------------------------------------------------------------------

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string("train config: ") + name + " must be > 0");
  };
  positive(lr, "lr");
  positive(epsilon, "epsilon");
  positive(clip_norm, "clip_norm");
  if (!(weight_decay >= 0.0)) throw ConfigError("train config: weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train config: beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train config: beta2 must be in [0, 1)");
  if (batch_size == 0) throw ConfigError("train config: batch_size must be >= 1");
  if (threads == 0) throw ConfigError("train config: threads must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"weight_decay", weight_decay},
          {"beta1", beta1},
          {"beta2", beta2},
          {"epsilon", epsilon},
          {"clip_norm", clip_norm},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"patience", patience},
          {"seed", seed},
          {"train_limit", train_limit},
          {"full_train_loss", full_train_loss},
          {"bifurcation_radius", bifurcation_radius},
          {"threads", threads}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "lr") c.lr = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "epsilon") c.epsilon = value.get<double>();
      else if (key == "clip_norm") c.clip_norm = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "patience") c.patience = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "train_limit") c.train_limit = value.get<std::size_t>();
      else if (key == "full_train_loss") c.full_train_loss = value.get<bool>();
      else if (key == "bifurcation_radius") c.bifurcation_radius = value.get<std::size_t>();
      else if (key == "threads") c.threads = value.get<std::size_t>();
      else throw ConfigError("train config: unknown field '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("train config: field '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

// ---- metrics ---------------------------------------------------------------

Tensor label_targets(const std::vector<int>& labels, std::size_t n) {
  Tensor t(Shape::chw(n, 1, 1));
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= n) throw ShapeError("label " + std::to_string(l) + " out of range");
    t[static_cast<std::size_t>(l)] = 1.0;
  }
  return t;
}

std::vector<int> predicted_labels(const Tensor& probs) {
  std::vector<int> out;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] >= 0.5) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::optional<double> exact_match_error(std::span<const LabelPrediction> preds,
                                        std::optional<std::size_t> digit_count) {
  std::size_t n = 0, wrong = 0;
  for (const auto& p : preds) {
    if (digit_count && p.truth.size() != *digit_count) continue;
    ++n;
    if (predicted_labels(p.probs) != p.truth) ++wrong;
  }
  if (n == 0) return std::nullopt;
  return static_cast<double>(wrong) / static_cast<double>(n);
}

double hamming_error(std::span<const LabelPrediction> preds) {
  std::size_t n = 0, wrong = 0;
  for (const auto& p : preds) {
    const Tensor t = label_targets(p.truth, p.probs.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      ++n;
      if ((p.probs[i] >= 0.5) != (t[i] >= 0.5)) ++wrong;
    }
  }
  return n == 0 ? 0.0 : static_cast<double>(wrong) / static_cast<double>(n);
}

double dice(const Tensor& pred, const Tensor& truth) {
  if (pred.size() != truth.size()) throw ShapeError("dice: mask sizes differ");
  std::size_t inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= 0.5, g = truth[i] >= 0.5;
    sp += p;
    sg += g;
    inter += p && g;
  }
  if (sp + sg == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sp + sg);
}

double avg_dice(std::span<const Tensor> preds, std::span<const Tensor> truths) {
  if (preds.size() != truths.size()) throw ShapeError("avg_dice: node counts differ");
  if (preds.empty()) throw ShapeError("avg_dice: no nodes");
  double s = 0.0;
  for (std::size_t j = 0; j < preds.size(); ++j) s += dice(preds[j], truths[j]);
  return s / static_cast<double>(preds.size());
}

// ---- optimizer ---------------------------------------------------------------

void adam_step(ParameterSet& params, AdamState& state, const TrainConfig& c) {
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p].grad.all_finite()) throw NumericError("non-finite gradient in " + params[p].name);
  }
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (std::size_t p = 0; p < params.size(); ++p) {
      state.m.emplace_back(params[p].value.shape());
      state.v.emplace_back(params[p].value.shape());
    }
    state.step = 0;
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Parameter& par = params[p];
    Tensor& m = state.m[p];
    Tensor& v = state.v[p];
    for (std::size_t i = 0; i < par.value.size(); ++i) {
      const double g = par.grad[i] + c.weight_decay * par.value[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      par.value[i] -= c.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.epsilon);
    }
  }
}

double grad_norm(const ParameterSet& params, bool recurrent_only) {
  double s = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (recurrent_only && !params[p].recurrent) continue;
    for (double g : params[p].grad.data()) s += g * g;
  }
  return std::sqrt(s);
}

double clip_grad_norm(ParameterSet& params, double max_norm, bool recurrent_only) {
  const double n = grad_norm(params, recurrent_only);
  if (n > max_norm) {
    const double k = max_norm / n;
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (recurrent_only && !params[p].recurrent) continue;
      for (double& g : params[p].grad.data()) g *= k;
    }
  }
  return n;
}

// ---- reports -----------------------------------------------------------------

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace

nlohmann::json EvalResult::to_json(const std::string& task) const {
  nlohmann::json j{{"loss", loss}, {"nodes", nodes}};
  if (task == "cls") {
    j["error"] = error;
    j["hamming_error"] = hamming;
    nlohmann::json by = nlohmann::json::object();
    for (const auto& [k, v] : error_by_digits) by[std::to_string(k)] = v;
    j["error_by_digits"] = by;
  } else {
    j["avg_dice"] = avg_dice;
    j["bifurcation_dice"] = optional_json(bifurcation_dice);
    j["bifurcation_nodes"] = bifurcation_nodes;
  }
  return j;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& e : epochs) {
    curve.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
                     {"val_metric", e.val_metric}});
  }
  return {{"task", task},
          {"model", model},
          {"seed", seed},
          {"initial_train_loss", initial_train_loss},
          {"best_epoch", best_epoch},
          {"best_val_metric", best_val_metric},
          {"val", val.to_json(task)},
          {"test", test.to_json(task)},
          {"epochs", curve}};
}

void MetricReport::write_json(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json().dump(2) << "\n";
}

void MetricReport::write_epoch_csv(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,train_loss,val_loss,val_metric,seconds\n";
  out.precision(17);
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_metric << ',' << e.seconds << '\n';
  }
}

// ---- evaluation ----------------------------------------------------------------

namespace {

/// Runs fn(i) for i in [0, n) on up to `threads` workers, each taking a
/// contiguous block.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t * chunk; i < std::min(n, (t + 1) * chunk); ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

Var classifier_loss(Tape& tape, Classifier& model, const TreeSample& s, std::vector<Var>* out = nullptr) {
  std::vector<Var> probs = classify_tree(tape, model, s.tree, s.frames);
  std::vector<Var> terms;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    terms.push_back(bce(probs[j], label_targets(s.labels.at(j), model.spec.labels)));
  }
  if (out != nullptr) *out = probs;
  return scale(add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

Var segmenter_loss(Tape& tape, SegNet& model, const TreeSample& s, std::vector<Var>* out = nullptr) {
  std::vector<Var> probs = seg_forward(tape, model, s.tree, s.frames);
  std::vector<Var> terms;
  for (std::size_t j = 0; j < probs.size(); ++j) terms.push_back(dice_loss(probs[j], s.masks.at(j)));
  if (out != nullptr) *out = probs;
  return scale(add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

}  // namespace

EvalResult evaluate_classifier(Classifier& model, std::span<const TreeSample* const> samples, std::size_t threads) {
  std::vector<double> losses(samples.size());
  std::vector<std::vector<LabelPrediction>> per(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const TreeSample& s = *samples[i];
    if (s.labels.size() != s.tree.node_count()) throw ShapeError("classification sample without labels");
    Tape tape;
    std::vector<Var> probs;
    losses[i] = classifier_loss(tape, model, s, &probs).value()[0];
    for (std::size_t j = 0; j < probs.size(); ++j) per[i].push_back({probs[j].value(), s.labels[j]});
  });
  EvalResult r;
  std::vector<LabelPrediction> all;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    r.loss += losses[i];
    for (auto& p : per[i]) all.push_back(std::move(p));
  }
  if (samples.empty()) return r;
  r.loss /= static_cast<double>(samples.size());
  r.nodes = all.size();
  r.error = exact_match_error(all).value_or(0.0);
  r.hamming = hamming_error(all);
  for (std::size_t k = 1; k <= 3; ++k) {
    if (auto e = exact_match_error(all, k)) r.error_by_digits[k] = *e;
  }
  return r;
}

EvalResult evaluate_segmenter(SegNet& model, std::span<const TreeSample* const> samples,
                              std::size_t bifurcation_radius, std::size_t threads) {
  std::vector<double> losses(samples.size());
  std::vector<std::vector<double>> node_dice(samples.size());
  std::vector<std::vector<bool>> near(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const TreeSample& s = *samples[i];
    if (s.masks.size() != s.tree.node_count()) throw ShapeError("segmentation sample without masks");
    Tape tape;
    std::vector<Var> probs;
    losses[i] = segmenter_loss(tape, model, s, &probs).value()[0];
    near[i].assign(s.tree.node_count(), false);
    for (NodeId j : bifurcation_neighborhood(s.tree, bifurcation_radius)) near[i][j] = true;
    for (std::size_t j = 0; j < probs.size(); ++j) node_dice[i].push_back(dice(probs[j].value(), s.masks[j]));
  });
  EvalResult r;
  if (samples.empty()) return r;
  double total = 0.0, bif = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    r.loss += losses[i];
    for (std::size_t j = 0; j < node_dice[i].size(); ++j) {
      total += node_dice[i][j];
      ++r.nodes;
      if (near[i][j]) {
        bif += node_dice[i][j];
        ++r.bifurcation_nodes;
      }
    }
  }
  r.loss /= static_cast<double>(samples.size());
  r.avg_dice = total / static_cast<double>(r.nodes);
  if (r.bifurcation_nodes > 0) r.bifurcation_dice = bif / static_cast<double>(r.bifurcation_nodes);
  return r;
}

// ---- training ----------------------------------------------------------------

namespace {

struct Protocol {
  std::string task;
  std::function<Var(Tape&, const TreeSample&)> loss;
  std::function<EvalResult(std::span<const TreeSample* const>)> evaluate;
  /// Scalar tracked for early stopping.
  std::function<double(const EvalResult&)> metric;
  bool higher_is_better = false;
};

MetricReport run_training(ParameterSet& params, const Dataset& data, const TrainConfig& config,
                          const Protocol& proto) {
  config.validate();
  std::vector<const TreeSample*> train = data.split(Split::Train);
  if (config.train_limit > 0 && train.size() > config.train_limit) train.resize(config.train_limit);
  const std::vector<const TreeSample*> val = data.split(Split::Val);
  const std::vector<const TreeSample*> test = data.split(Split::Test);
  if (train.empty()) throw ConfigError("dataset has no training samples");
  if (val.empty()) throw ConfigError("dataset has no validation samples");

  MetricReport report;
  report.task = proto.task;
  report.seed = config.seed;
  report.initial_train_loss = proto.evaluate(train).loss;

  auto better = [&](double a, double b) { return proto.higher_is_better ? a > b : a < b; };
  EvalResult v0 = proto.evaluate(val);
  report.best_epoch = 0;
  report.best_val_metric = proto.metric(v0);
  std::vector<Tensor> best = params.snapshot();
  report.epochs.push_back({0, report.initial_train_loss, v0.loss, report.best_val_metric, 0.0});

  AdamState adam;
  std::mt19937_64 rng(config.seed ^ 0x5DEECE66DULL);
  std::vector<std::size_t> order(train.size());
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[std::uniform_int_distribution<std::size_t>(0, i - 1)(rng)]);
    }
    double running = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      params.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        Tape tape;
        Var loss = scale(proto.loss(tape, *train[order[k]]), 1.0 / static_cast<double>(end - start));
        const double value = loss.value()[0] * static_cast<double>(end - start);
        if (!std::isfinite(value)) {
          std::ostringstream trace;
          trace << "training diverged: non-finite loss at epoch " << epoch << ", step " << k << "; epoch losses:";
          for (const auto& e : report.epochs) trace << ' ' << e.epoch << ':' << e.train_loss;
          throw NumericError(trace.str());
        }
        running += value;
        tape.backward(loss);
      }
      clip_grad_norm(params, config.clip_norm, true);
      adam_step(params, adam, config);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = config.full_train_loss ? proto.evaluate(train).loss : running / static_cast<double>(order.size());
    EvalResult v = proto.evaluate(val);
    rec.val_loss = v.loss;
    rec.val_metric = proto.metric(v);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(rec);
    if (better(rec.val_metric, report.best_val_metric)) {
      report.best_val_metric = rec.val_metric;
      report.best_epoch = epoch;
      best = params.snapshot();
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  params.restore(best);
  report.val = proto.evaluate(val);
  report.test = test.empty() ? EvalResult{} : proto.evaluate(test);
  return report;
}

}  // namespace

MetricReport train_classifier(Classifier& model, const Dataset& data, const TrainConfig& config) {
  if (data.info.kind != DatasetKind::MnistTree) throw ConfigError("classifier training needs an mnist-tree dataset");
  Protocol p;
  p.task = "cls";
  p.loss = [&](Tape& tape, const TreeSample& s) { return classifier_loss(tape, model, s); };
  p.evaluate = [&](std::span<const TreeSample* const> s) { return evaluate_classifier(model, s, config.threads); };
  p.metric = [](const EvalResult& r) { return r.error; };
  MetricReport r = run_training(model.params, data, config, p);
  r.model = to_string(model.spec.variant);
  return r;
}

MetricReport train_segmenter(SegNet& model, const Dataset& data, const TrainConfig& config) {
  if (data.info.kind != DatasetKind::TubeTree) throw ConfigError("segmenter training needs a tube-tree dataset");
  Protocol p;
  p.task = "seg";
  p.loss = [&](Tape& tape, const TreeSample& s) { return segmenter_loss(tape, model, s); };
  p.evaluate = [&](std::span<const TreeSample* const> s) {
    return evaluate_segmenter(model, s, config.bifurcation_radius, config.threads);
  };
  p.metric = [](const EvalResult& r) { return r.avg_dice; };
  p.higher_is_better = true;
  MetricReport r = run_training(model.params, data, config, p);
  r.model = model.spec.recurrence == Recurrence::None ? "cnn"
            : model.spec.recurrence == Recurrence::Sequential ? "clstm"
            : model.spec.attention ? "att-treeclstm"
                                   : "treeclstm";
  return r;
}

// ---- checkpoints -------------------------------------------------------------

namespace {

constexpr std::array<char, 4> kCheckpointMagic{'T', 'C', 'W', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                              static_cast<char>(v >> 24)};
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in, const fs::path& path) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw ParseError(path.string() + ": truncated checkpoint");
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) | (std::uint32_t{b[3]} << 24);
}

}  // namespace

void write_checkpoint(const fs::path& path, const ParameterSet& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kCheckpointMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::string& name = params[p].name;
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_record(out, params[p].value);
  }
}

void read_checkpoint(const fs::path& path, ParameterSet& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kCheckpointMagic) throw ParseError(path.string() + ": not a checkpoint");
  const std::uint32_t n = get_u32(in, path);
  if (n != params.size()) {
    throw ConfigError(path.string() + ": architecture mismatch, checkpoint has " + std::to_string(n) +
                      " parameters, model has " + std::to_string(params.size()));
  }
  std::vector<Tensor> values;
  for (std::size_t p = 0; p < n; ++p) {
    const std::uint32_t len = get_u32(in, path);
    if (len > 4096) throw ParseError(path.string() + ": implausible name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw ParseError(path.string() + ": truncated checkpoint");
    if (name != params[p].name) {
      throw ConfigError(path.string() + ": architecture mismatch at parameter " + std::to_string(p) + ": '" + name +
                        "' vs '" + params[p].name + "'");
    }
    Tensor t = read_record(in);
    const Shape& want = params[p].value.shape();
    if (t.shape().n * t.shape().c != want.n * want.c || t.shape().h != want.h || t.shape().w != want.w) {
      throw ConfigError(path.string() + ": architecture mismatch, " + name + " is " + t.shape().str() +
                        ", model expects " + want.str());
    }
    values.push_back(t.reshaped(want));
  }
  params.restore(values);
}

}  // namespace treeclstm
