#pragma once

// Experiment configuration files, model presets and run manifests.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeclstm/models.hpp"
#include "treeclstm/training.hpp"

namespace treeclstm {

enum class Task { Cls, Seg };
std::string to_string(Task t);
Task task_from_string(const std::string& s);

/// Model names accepted by `train --model`.
inline const std::vector<std::string> kClassifierModels{"cnn", "clstm", "treelstm", "treeclstm"};
inline const std::vector<std::string> kSegmenterModels{"cnn", "clstm", "treeclstm", "att-treeclstm"};

/// Config file layout:
///
///   { "task": "cls", "model": "treeclstm",
///     "train": { TrainConfig fields },
///     "classifier": { ClassifierSpec fields },
///     "segnet": { SegNetSpec fields } }
///
/// Every section and key is optional; unknown keys are errors. The model
/// name overrides the variant / recurrence / attention fields of the model spec.
struct ExperimentConfig {
  Task task = Task::Cls;
  std::string model = "treeclstm";
  TrainConfig train;
  ClassifierSpec classifier;
  SegNetSpec segnet;

  /// Checks the task/model pairing and the spec of the active task.
  void validate() const;
  /// Full effective config including defaults.
  nlohmann::json to_json() const;
  /// `source` prefixes error messages (usually the file path).
  static ExperimentConfig from_json(const nlohmann::json& j, const std::string& source = "config");
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Classifier spec with the variant set from `model`.
  ClassifierSpec classifier_spec() const;
  /// Segmenter spec with recurrence and attention set from `model`.
  SegNetSpec segnet_spec() const;
};

/// Reduced-width models and optimizer settings sized for a single CPU core.
ExperimentConfig desk_config(Task task, const std::string& model);
/// Tube-tree generator settings paired with the desk segmenter.
TubeTreeOptions desk_tube_options();

/// 16 hex digits of FNV-1a 64.
std::string fnv1a_hex(const std::string& bytes);

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string dataset;
  std::string git_describe;
  std::string started;
  std::string finished;
  std::vector<std::string> outputs;

  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;
};

/// UTC time as ISO 8601.
std::string utc_timestamp();
/// `git describe` of the source tree at build time.
std::string build_git_describe();

}  // namespace treeclstm
