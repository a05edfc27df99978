#include "treeclstm/config.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>

#include "treeclstm/errors.hpp"

#ifndef TREECLSTM_GIT_DESCRIBE
#define TREECLSTM_GIT_DESCRIBE "unknown"
#endif

namespace treeclstm {

namespace fs = std::filesystem;

std::string to_string(Task t) { return t == Task::Cls ? "cls" : "seg"; }

Task task_from_string(const std::string& s) {
  if (s == "cls") return Task::Cls;
  if (s == "seg") return Task::Seg;
  throw ConfigError("unknown task '" + s + "' (expected cls or seg)");
}

namespace {

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : "|") + s;
  return out;
}

/// Rejects keys that the default object does not have.
void check_keys(const nlohmann::json& j, const nlohmann::json& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError(where + "." + key + ": unknown field");
  }
}

template <class Fn>
auto with_path(const std::string& where, Fn&& fn) {
  try {
    return fn();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  const auto& names = task == Task::Cls ? kClassifierModels : kSegmenterModels;
  if (!contains(names, model)) {
    throw ConfigError("model '" + model + "' is not available for task " + to_string(task) + " (expected " +
                      join(names) + ")");
  }
  train.validate();
  if (task == Task::Cls) {
    (void)classifier_spec().feature_size();
  } else {
    segnet_spec().validate();
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"task", to_string(task)},
          {"model", model},
          {"train", train.to_json()},
          {"classifier", classifier_spec().to_json()},
          {"segnet", segnet_spec().to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j, const std::string& source) {
  ExperimentConfig c;
  check_keys(j, c.to_json(), source);
  if (j.contains("task")) c.task = with_path(source + ".task", [&] { return task_from_string(j["task"].get<std::string>()); });
  if (j.contains("model")) c.model = with_path(source + ".model", [&] { return j["model"].get<std::string>(); });
  if (j.contains("train")) c.train = with_path(source + ".train", [&] { return TrainConfig::from_json(j["train"]); });
  if (j.contains("classifier")) {
    check_keys(j["classifier"], ClassifierSpec{}.to_json(), source + ".classifier");
    c.classifier = with_path(source + ".classifier", [&] { return ClassifierSpec::from_json(j["classifier"]); });
  }
  if (j.contains("segnet")) {
    check_keys(j["segnet"], SegNetSpec{}.to_json(), source + ".segnet");
    c.segnet = with_path(source + ".segnet", [&] { return SegNetSpec::from_json(j["segnet"]); });
  }
  with_path(source, [&] {
    c.validate();
    return 0;
  });
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return from_json(j, path.string());
}

ClassifierSpec ExperimentConfig::classifier_spec() const {
  ClassifierSpec s = classifier;
  if (contains(kClassifierModels, model)) s.variant = classifier_variant_from_string(model);
  return s;
}

SegNetSpec ExperimentConfig::segnet_spec() const {
  SegNetSpec s = segnet;
  if (model == "cnn") {
    s.recurrence = Recurrence::None;
    s.attention = false;
  } else if (model == "clstm") {
    s.recurrence = Recurrence::Sequential;
    s.attention = false;
  } else if (model == "treeclstm") {
    s.recurrence = Recurrence::Tree;
    s.attention = false;
  } else if (model == "att-treeclstm") {
    s.recurrence = Recurrence::Tree;
    s.attention = true;
  }
  return s;
}

ExperimentConfig desk_config(Task task, const std::string& model) {
  ExperimentConfig c;
  c.task = task;
  c.model = model;
  c.train.epochs = 20;
  if (task == Task::Cls) {
    ClassifierSpec& s = c.classifier;
    s.input_pool = 1;
    s.conv1_channels = 6;
    s.conv2_channels = 16;
    s.conv3_channels = 12;
    s.recurrent_hidden = 12;
    s.vector_hidden = 32;
    s.dense_hidden = 64;
  } else {
    SegNetSpec& s = c.segnet;
    s.widths = {4, 8};
    s.padded_size = 42;
    s.site = RecurrentSite::Conv3_2;
    s.recurrent_hidden = 4;
    c.train.lr = 5e-3;
    c.train.epochs = 25;
  }
  c.validate();
  return c;
}

TubeTreeOptions desk_tube_options() {
  TubeTreeOptions o;
  o.node_budget = 11;
  return o;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::json RunManifest::to_json() const {
  return {{"command", command},   {"config_hash", config_hash}, {"seed", seed},       {"dataset", dataset},
          {"git_describe", git_describe}, {"started", started},  {"finished", finished}, {"outputs", outputs}};
}

void RunManifest::write(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json().dump(2) << "\n";
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string build_git_describe() { return TREECLSTM_GIT_DESCRIBE; }

}  // namespace treeclstm
