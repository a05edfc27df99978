#pragma once

// Losses, metrics, Adam, gradient clipping, early-stopped training loops and
// checkpoint files.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeclstm/autograd.hpp"
#include "treeclstm/datagen.hpp"
#include "treeclstm/models.hpp"

namespace treeclstm {

struct TrainConfig {
  double lr = 1e-3;
  /// Coupled L2: weight_decay * theta is added to every gradient.
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global-norm clip applied to the recurrent parameter group.
  double clip_norm = 50.0;
  /// Trees per optimizer step.
  std::size_t batch_size = 1;
  std::size_t epochs = 20;
  /// Stop after this many epochs without a validation improvement.
  std::size_t patience = 10;
  std::uint64_t seed = 1;
  /// Use only the first N training trees (0 = all).
  std::size_t train_limit = 0;
  /// Re-evaluate the loss on the whole training split after every epoch.
  bool full_train_loss = false;
  /// Radius (edges) of the bifurcation neighbourhood used for Dice.
  std::size_t bifurcation_radius = 1;
  /// Worker threads for evaluation passes.
  std::size_t threads = 1;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
};

// ---- metrics ---------------------------------------------------------------

/// 0/1 indicator tensor (n, 1, 1) of a label set.
Tensor label_targets(const std::vector<int>& labels, std::size_t n = 10);

/// Thresholds probabilities at 0.5.
std::vector<int> predicted_labels(const Tensor& probs);

struct LabelPrediction {
  Tensor probs;
  std::vector<int> truth;
};

/// Fraction of nodes whose thresholded label set differs from the truth,
/// optionally restricted to nodes with `digit_count` true labels. Returns
/// nullopt when no node qualifies.
std::optional<double> exact_match_error(std::span<const LabelPrediction> preds,
                                        std::optional<std::size_t> digit_count = std::nullopt);
/// Fraction of wrong (node, label) decisions.
double hamming_error(std::span<const LabelPrediction> preds);

/// Dice of two binary masks, thresholded at 0.5; two empty masks score 1.
double dice(const Tensor& pred, const Tensor& truth);
/// Mean per-node Dice.
double avg_dice(std::span<const Tensor> preds, std::span<const Tensor> truths);

// ---- optimizer ---------------------------------------------------------------

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
};

/// One Adam update from Parameter::grad (plus weight decay). Throws
/// NumericError and leaves every parameter untouched if a gradient is not
/// finite.
void adam_step(ParameterSet& params, AdamState& state, const TrainConfig& config);

/// L2 norm of the gradients of the selected group.
double grad_norm(const ParameterSet& params, bool recurrent_only);
/// Scales the group's gradients by max_norm / norm when norm > max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(ParameterSet& params, double max_norm, bool recurrent_only = true);

// ---- reports -----------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  /// Mean loss over the steps of the epoch (full-split loss when configured).
  double train_loss = 0.0;
  double val_loss = 0.0;
  /// Exact-match error (classification) or average Dice (segmentation).
  double val_metric = 0.0;
  double seconds = 0.0;
};

struct EvalResult {
  double loss = 0.0;
  std::size_t nodes = 0;
  // classification
  double error = 0.0;
  double hamming = 0.0;
  std::map<std::size_t, double> error_by_digits;
  // segmentation
  double avg_dice = 0.0;
  std::optional<double> bifurcation_dice;
  std::size_t bifurcation_nodes = 0;

  nlohmann::json to_json(const std::string& task) const;
};

struct MetricReport {
  std::string task;
  std::string model;
  std::uint64_t seed = 0;
  double initial_train_loss = 0.0;
  std::size_t best_epoch = 0;
  double best_val_metric = 0.0;
  EvalResult val;
  EvalResult test;
  std::vector<EpochRecord> epochs;

  nlohmann::json to_json() const;
  void write_json(const std::filesystem::path& path) const;
  void write_epoch_csv(const std::filesystem::path& path) const;
};

// ---- training ----------------------------------------------------------------

EvalResult evaluate_classifier(Classifier& model, std::span<const TreeSample* const> samples,
                               std::size_t threads = 1);
EvalResult evaluate_segmenter(SegNet& model, std::span<const TreeSample* const> samples,
                              std::size_t bifurcation_radius = 1, std::size_t threads = 1);

/// Trains with early stopping on validation exact-match error and leaves the
/// best-validation weights in `model`. Epoch 0 (the untrained model) counts
/// as an observation.
MetricReport train_classifier(Classifier& model, const Dataset& data, const TrainConfig& config);
/// Same protocol, early-stopping on validation average Dice.
MetricReport train_segmenter(SegNet& model, const Dataset& data, const TrainConfig& config);

// ---- checkpoints -------------------------------------------------------------

/// "TCW1", u32 record count, then per parameter: u32 name length, name,
/// tensor record.
void write_checkpoint(const std::filesystem::path& path, const ParameterSet& params);
/// Loads into an existing set; names and shapes must match exactly.
void read_checkpoint(const std::filesystem::path& path, ParameterSet& params);

}  // namespace treeclstm
