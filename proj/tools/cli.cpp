#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "treeclstm/config.hpp"
#include "treeclstm/datagen.hpp"
#include "treeclstm/errors.hpp"
#include "treeclstm/gradcheck.hpp"
#include "treeclstm/training.hpp"

namespace treeclstm::cli {

namespace fs = std::filesystem;

namespace {

std::string command_line(const std::vector<std::string>& args) {
  std::string s;
  for (const auto& a : args) s += (s.empty() ? "" : " ") + a;
  return s;
}

void ensure_empty_dir(const fs::path& out) {
  if (fs::exists(out) && !(fs::is_directory(out) && fs::is_empty(out))) {
    throw IoError("refusing to write into non-empty " + out.string());
  }
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f || !(f << text)) throw IoError("cannot write " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

/// Throws when the dataset cannot feed the model of `config`.
void check_compatible(const ExperimentConfig& config, const DatasetInfo& info) {
  const DatasetKind want = config.task == Task::Cls ? DatasetKind::MnistTree : DatasetKind::TubeTree;
  if (info.kind != want) {
    throw ConfigError("architecture mismatch: task " + to_string(config.task) + " needs a " + to_string(want) +
                      " dataset, got " + to_string(info.kind));
  }
  Shape frame;
  if (config.task == Task::Cls) {
    const ClassifierSpec s = config.classifier_spec();
    frame = Shape::chw(1, s.frame_size, s.frame_size);
  } else {
    const SegNetSpec s = config.segnet_spec();
    frame = Shape::chw(s.in_channels, s.frame_size, s.frame_size);
  }
  if (!(frame == info.frame)) {
    throw ConfigError("architecture mismatch: model expects frames " + frame.str() + ", dataset has " +
                      info.frame.str());
  }
}

struct Model {
  ExperimentConfig config;
  std::optional<Classifier> classifier;
  std::optional<SegNet> segnet;

  ParameterSet& params() { return classifier ? classifier->params : segnet->params; }
};

Model build_model(const ExperimentConfig& config) {
  Model m{config, std::nullopt, std::nullopt};
  if (config.task == Task::Cls) {
    m.classifier = build_classifier(config.classifier_spec(), config.train.seed);
  } else {
    m.segnet = build_segnet(config.segnet_spec(), config.train.seed);
  }
  return m;
}

MetricReport train_model(Model& m, const Dataset& data) {
  return m.classifier ? train_classifier(*m.classifier, data, m.config.train)
                      : train_segmenter(*m.segnet, data, m.config.train);
}

void write_pgm(const fs::path& path, const Tensor& map) {
  const Shape s = map.shape();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << "P5\n" << s.w << " " << s.h << "\n255\n";
  for (std::size_t i = 0; i < s.h * s.w; ++i) {
    f.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(map[i], 0.0, 1.0) * 255.0))));
  }
}

// ---- gen ---------------------------------------------------------------------

struct GenArgs {
  std::string kind;
  std::uint64_t seed = 1;
  std::size_t count = 0;
  std::string out;
  std::size_t nodes = 0;
  std::string mnist_dir;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  const DatasetKind kind = dataset_kind_from_string(a.kind);
  if (a.count == 0) throw ConfigError("--count must be >= 1");
  TubeTreeOptions tube;
  if (a.nodes > 0) tube.node_budget = a.nodes;
  std::optional<MnistPool> pool;
  if (kind == DatasetKind::MnistTree) {
    if (a.nodes > 0) throw ConfigError("--nodes applies to tube-tree only");
    pool = MnistPool::load(a.mnist_dir.empty() ? default_mnist_dir() : fs::path(a.mnist_dir));
  }
  generate_dataset(a.out, kind, a.seed, a.count, pool ? &*pool : nullptr, {}, tube);
  const SplitSizes s = split_sizes(a.count);
  out << nlohmann::json{{"out", a.out}, {"kind", a.kind}, {"count", a.count},
                        {"splits", {{"train", s.train}, {"val", s.val}, {"test", s.test}}}}
             .dump()
      << "\n";
  return kOk;
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::string task;
  std::string model;
  std::string data;
  std::string out;
  std::string config;
  bool desk = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::size_t> patience;
  std::optional<std::size_t> train_size;
  std::optional<std::size_t> threads;
  std::optional<std::size_t> batch_size;
};

ExperimentConfig effective_config(const TrainArgs& a) {
  const Task task = task_from_string(a.task);
  ExperimentConfig c;
  if (!a.config.empty()) {
    c = ExperimentConfig::load(a.config);
    if (c.task != task) throw ConfigError(a.config + ": task is " + to_string(c.task) + ", command asks for " + a.task);
  } else if (a.desk) {
    c = desk_config(task, a.model);
  } else {
    c.task = task;
  }
  c.model = a.model;
  if (a.seed) c.train.seed = *a.seed;
  if (a.epochs) c.train.epochs = *a.epochs;
  if (a.lr) c.train.lr = *a.lr;
  if (a.patience) c.train.patience = *a.patience;
  if (a.train_size) c.train.train_limit = *a.train_size;
  if (a.threads) c.train.threads = *a.threads;
  if (a.batch_size) c.train.batch_size = *a.batch_size;
  c.validate();
  return c;
}

int cmd_train(const TrainArgs& a, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const ExperimentConfig config = effective_config(a);
  const fs::path dir = a.out;
  const DatasetInfo info = read_dataset_info(a.data);
  check_compatible(config, info);
  ensure_empty_dir(dir);

  RunManifest manifest;
  manifest.command = command_line(args);
  manifest.seed = config.train.seed;
  manifest.dataset = fs::absolute(a.data).string();
  manifest.git_describe = build_git_describe();
  manifest.started = utc_timestamp();

  const std::string config_text = config.to_json().dump(2) + "\n";
  write_text(dir / "config.json", config_text);
  manifest.config_hash = fnv1a_hex(config_text);

  const Dataset data = load_dataset(a.data);
  Model model = build_model(config);
  MetricReport report;
  try {
    report = train_model(model, data);
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    manifest.finished = utc_timestamp();
    manifest.outputs = {"config.json"};
    manifest.write(dir / "manifest.json");
    return kNumeric;
  }
  const nlohmann::json model_json{{"task", to_string(config.task)},
                                  {"model", config.model},
                                  {"spec", config.task == Task::Cls ? config.classifier_spec().to_json()
                                                                    : config.segnet_spec().to_json()},
                                  {"bifurcation_radius", config.train.bifurcation_radius}};
  write_text(dir / "model.json", model_json.dump(2) + "\n");
  write_checkpoint(dir / "checkpoint.bin", model.params());
  report.write_json(dir / "metrics.json");
  report.write_epoch_csv(dir / "epochs.csv");
  manifest.finished = utc_timestamp();
  manifest.outputs = {"config.json", "model.json", "checkpoint.bin", "metrics.json", "epochs.csv"};
  manifest.write(dir / "manifest.json");
  out << nlohmann::json{{"out", a.out}, {"best_epoch", report.best_epoch}, {"best_val_metric", report.best_val_metric}}
             .dump()
      << "\n";
  return kOk;
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string breakdown;
  std::string out;
  std::string dump_pgm;
  std::size_t threads = 1;
  std::optional<std::size_t> bifurcation_radius;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  fs::path ckpt = a.checkpoint;
  if (fs::is_directory(ckpt)) ckpt /= "checkpoint.bin";
  const nlohmann::json mj = read_json(ckpt.parent_path() / "model.json");
  ExperimentConfig config;
  try {
    config.task = task_from_string(mj.at("task").get<std::string>());
    config.model = mj.at("model").get<std::string>();
    if (config.task == Task::Cls) config.classifier = ClassifierSpec::from_json(mj.at("spec"));
    else config.segnet = SegNetSpec::from_json(mj.at("spec"));
    if (mj.contains("bifurcation_radius")) config.train.bifurcation_radius = mj["bifurcation_radius"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((ckpt.parent_path() / "model.json").string() + ": " + e.what());
  }
  if (a.bifurcation_radius) config.train.bifurcation_radius = *a.bifurcation_radius;
  config.validate();
  if (!a.breakdown.empty() && a.breakdown != "digits" && a.breakdown != "bifurcation") {
    throw ConfigError("--breakdown must be digits or bifurcation");
  }
  if (a.breakdown == "digits" && config.task != Task::Cls) throw ConfigError("--breakdown digits needs a classifier");
  if (a.breakdown == "bifurcation" && config.task != Task::Seg) {
    throw ConfigError("--breakdown bifurcation needs a segmenter");
  }
  if (!a.dump_pgm.empty() && config.task != Task::Seg) throw ConfigError("--dump-pgm needs a segmenter");

  const DatasetInfo info = read_dataset_info(a.data);
  check_compatible(config, info);
  Model model = build_model(config);
  read_checkpoint(ckpt, model.params());
  const Dataset data = load_dataset(a.data);
  const std::vector<const TreeSample*> samples = data.split(split_from_string(a.split));
  if (samples.empty()) throw ConfigError("split " + a.split + " of " + a.data + " is empty");

  const EvalResult r = model.classifier
                           ? evaluate_classifier(*model.classifier, samples, a.threads)
                           : evaluate_segmenter(*model.segnet, samples, config.train.bifurcation_radius, a.threads);
  nlohmann::json j{{"task", to_string(config.task)}, {"model", config.model}, {"split", a.split}};
  j["metrics"] = r.to_json(to_string(config.task));
  if (a.breakdown == "digits") {
    nlohmann::json b = nlohmann::json::object();
    for (std::size_t k = 1; k <= 3; ++k) {
      const auto it = r.error_by_digits.find(k);
      b[std::to_string(k)] = it == r.error_by_digits.end() ? nlohmann::json("n/a") : nlohmann::json(it->second);
    }
    j["breakdown"] = b;
  } else if (a.breakdown == "bifurcation") {
    j["breakdown"] = {{"bifurcation_dice", r.bifurcation_dice ? nlohmann::json(*r.bifurcation_dice) : "n/a"},
                      {"bifurcation_nodes", r.bifurcation_nodes},
                      {"avg_dice", r.avg_dice}};
  }
  if (!a.dump_pgm.empty()) {
    fs::create_directories(a.dump_pgm);
    std::ostringstream listing;
    listing << "file,sample_id,node,dice\n";
    for (const TreeSample* s : samples) {
      const std::size_t index = static_cast<std::size_t>(s - data.samples.data());
      Tape tape;
      const std::vector<Var> maps = seg_forward(tape, *model.segnet, s->tree, s->frames);
      for (std::size_t n = 0; n < maps.size(); ++n) {
        const std::string file = sample_id(index) + "_node" + std::to_string(n) + ".pgm";
        write_pgm(fs::path(a.dump_pgm) / file, maps[n].value());
        listing << file << ',' << sample_id(index) << ',' << n << ',' << dice(maps[n].value(), s->masks[n]) << '\n';
      }
    }
    write_text(fs::path(a.dump_pgm) / "index.csv", listing.str());
  }
  if (!a.out.empty()) write_text(a.out, j.dump(2) + "\n");
  out << j.dump(2) << "\n";
  return kOk;
}

// ---- gradcheck -----------------------------------------------------------------

int cmd_gradcheck(const std::string& cell, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  const GradTarget target = grad_target_from_string(cell);
  const GradCheckReport r = run_gradcheck(target, seed);
  out << "gradcheck " << to_string(target) << " seed " << seed << " threshold " << r.threshold << "\n";
  for (const auto& g : r.groups) {
    out << "  " << g.name << " checked " << g.checked << " max_rel_error " << g.max_rel_error << " "
        << (g.passed ? "ok" : "FAIL") << "\n";
  }
  out << (r.passed() ? "PASS" : "FAIL") << " max_rel_error " << r.max_rel_error() << "\n";
  if (!r.passed()) {
    err << "gradcheck failed for:";
    for (const auto& name : r.failing()) err << " " << name;
    err << "\n";
    return kCheckFailed;
  }
  return kOk;
}

// ---- curve -------------------------------------------------------------------

struct CurveArgs {
  std::string data;
  std::string out;
  std::string config;
  bool desk = false;
  std::vector<std::size_t> sizes{1000, 2500, 5000, 10000};
  std::vector<std::string> models{"cnn", "clstm", "treelstm", "treeclstm"};
  std::uint64_t seed = 1;
  std::optional<std::size_t> epochs;
};

int cmd_curve(const CurveArgs& a, std::ostream& out) {
  const Dataset data = load_dataset(a.data);
  std::ostringstream csv;
  csv << "train_size,model,digit_count,error\n";
  csv.precision(17);
  for (std::size_t size : a.sizes) {
    for (const std::string& name : a.models) {
      TrainArgs t;
      t.task = "cls";
      t.model = name;
      t.config = a.config;
      t.desk = a.desk;
      t.seed = a.seed;
      t.epochs = a.epochs;
      t.train_size = size;
      const ExperimentConfig config = effective_config(t);
      check_compatible(config, data.info);
      Model m = build_model(config);
      const MetricReport r = train_model(m, data);
      for (const auto& [k, e] : r.test.error_by_digits) csv << size << ',' << name << ',' << k << ',' << e << '\n';
    }
  }
  write_text(a.out, csv.str());
  out << csv.str();
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Tree-structured ConvLSTM experiments"};
  app.require_subcommand(1);

  GenArgs gen;
  CLI::App* g = app.add_subcommand("gen", "Generate a dataset directory");
  g->add_option("kind", gen.kind, "mnist-tree or tube-tree")->required()->check(CLI::IsMember({"mnist-tree", "tube-tree"}));
  g->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
  g->add_option("--count", gen.count, "Number of trees")->required();
  g->add_option("--out", gen.out, "Output directory (must be empty or absent)")->required();
  g->add_option("--nodes", gen.nodes, "Tube-tree node budget (default 15)");
  g->add_option("--mnist-dir", gen.mnist_dir, "Directory with the MNIST IDX files");

  TrainArgs tr;
  CLI::App* t = app.add_subcommand("train", "Train a model and write its run directory");
  t->add_option("task", tr.task, "cls or seg")->required()->check(CLI::IsMember({"cls", "seg"}));
  t->add_option("--model", tr.model, "cnn|clstm|treelstm|treeclstm|att-treeclstm")->required();
  t->add_option("--data", tr.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--out", tr.out, "Run directory (must be empty or absent)")->required();
  auto* cfg = t->add_option("--config", tr.config, "JSON config file")->check(CLI::ExistingFile);
  t->add_flag("--desk", tr.desk, "Start from the single-core desk preset")->excludes(cfg);
  t->add_option("--seed", tr.seed, "Initialization and shuffling seed");
  t->add_option("--epochs", tr.epochs);
  t->add_option("--lr", tr.lr);
  t->add_option("--patience", tr.patience);
  t->add_option("--train-size", tr.train_size, "Use only the first N training trees");
  t->add_option("--threads", tr.threads, "Evaluation threads");
  t->add_option("--batch-size", tr.batch_size);

  EvalArgs ev;
  CLI::App* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint.bin or its run directory")->required()->check(CLI::ExistingPath);
  e->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--split", ev.split)->capture_default_str()->check(CLI::IsMember({"train", "val", "test"}));
  e->add_option("--breakdown", ev.breakdown, "digits or bifurcation");
  e->add_option("--out", ev.out, "Also write the metrics JSON here");
  e->add_option("--dump-pgm", ev.dump_pgm, "Directory for predicted probability maps (seg)");
  e->add_option("--threads", ev.threads)->capture_default_str();
  e->add_option("--bifurcation-radius", ev.bifurcation_radius);

  std::string cell;
  std::uint64_t gc_seed = 1;
  CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  gc->add_option("--cell", cell, "lstm|convlstm|treelstm|treeclstm|attention|segnet")->required();
  gc->add_option("--seed", gc_seed)->capture_default_str();

  CurveArgs cv;
  CLI::App* c = app.add_subcommand("curve", "Classification error by digit count versus training size");
  c->add_option("--data", cv.data, "mnist-tree dataset directory")->required()->check(CLI::ExistingDirectory);
  c->add_option("--out", cv.out, "CSV path")->required();
  auto* ccfg = c->add_option("--config", cv.config)->check(CLI::ExistingFile);
  c->add_flag("--desk", cv.desk)->excludes(ccfg);
  c->add_option("--sizes", cv.sizes, "Training-set sizes")->delimiter(',')->capture_default_str();
  c->add_option("--models", cv.models)->delimiter(',')->capture_default_str();
  c->add_option("--seed", cv.seed)->capture_default_str();
  c->add_option("--epochs", cv.epochs);

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& pe) {
    return app.exit(pe, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (g->parsed()) return cmd_gen(gen, out);
    if (t->parsed()) return cmd_train(tr, args, out, err);
    if (e->parsed()) return cmd_eval(ev, out);
    if (gc->parsed()) return cmd_gradcheck(cell, gc_seed, out, err);
    if (c->parsed()) return cmd_curve(cv, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const ShapeError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const NumericError& ex) {
    err << "error: " << ex.what() << "\n";
    return kNumeric;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kIo;
  }
  return kUsage;
}

}  // namespace treeclstm::cli
