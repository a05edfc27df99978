#pragma once

// Network assemblies built from the tensor ops and recurrent cells:
// LeNet-style multi-label tree classifiers and the attention FCN segmenter.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeclstm/autograd.hpp"
#include "treeclstm/cells.hpp"
#include "treeclstm/treegraph.hpp"

namespace treeclstm {

inline constexpr double kInitStddev = 0.02;

// ---- attention block -------------------------------------------------------

struct AttentionMaps {
  Var f;
  Var f_prime;
  Var alpha;
  Var f_att;
  Var f_tilde;
};

/// Registers `depth` 3x3 conv layers (channels -> channels) under prefix.
void add_attention_params(ParameterSet& params, const std::string& prefix, std::size_t channels,
                          std::size_t depth);

/// alpha = sigmoid(conv stack(F)) per channel and pixel, ReLU between the
/// stacked convs; returns concat_channels(F, alpha * F).
Var attention_block(Tape& tape, ParameterSet& params, const std::string& prefix, Var f, std::size_t depth,
                    AttentionMaps* maps = nullptr);

// ---- classifiers -----------------------------------------------------------

enum class ClassifierVariant { Cnn, Clstm, TreeLstm, TreeClstm };

std::string to_string(ClassifierVariant v);
ClassifierVariant classifier_variant_from_string(const std::string& s);

/// LeNet adapted to 64x64 frames: optional input max-pooling, conv5x5 + pool,
/// conv5x5 + pool, conv3x3,
/// optional recurrent layer, one hidden dense layer, `labels` sigmoid outputs.
struct ClassifierSpec {
  ClassifierVariant variant = ClassifierVariant::TreeClstm;
  std::size_t frame_size = 64;
  /// Number of parameter-free 2x2 max-pool steps applied to each frame before
  /// conv1 (0 keeps full resolution).
  std::size_t input_pool = 0;
  std::size_t conv1_channels = 6;
  std::size_t conv2_channels = 16;
  std::size_t conv3_channels = 16;
  /// Hidden channels of the ConvLSTM cells.
  std::size_t recurrent_hidden = 32;
  /// Hidden size of the fully-connected tree LSTM.
  std::size_t vector_hidden = 64;
  std::size_t cell_kernel = 3;
  std::size_t dense_hidden = 64;
  std::size_t labels = 10;

  /// Spatial side of the conv3 feature map.
  std::size_t feature_size() const;
  nlohmann::json to_json() const;
  static ClassifierSpec from_json(const nlohmann::json& j);
};

struct Classifier {
  ClassifierSpec spec;
  ParameterSet params;
};

/// Conv and recurrent weights ~ N(0, 0.02^2) from `seed`, the two dense
/// layers fan-in scaled; biases zero.
Classifier build_classifier(const ClassifierSpec& spec, unsigned long long seed);

/// Per-node label probabilities, each of shape (labels, 1, 1). Frames are
/// indexed by node id and must be 1 x frame_size x frame_size.
std::vector<Var> classify_tree(Tape& tape, Classifier& model, const TreeGraph& tree,
                               std::span<const Tensor> frames);

// ---- segmentation ----------------------------------------------------------

enum class Recurrence { None, Sequential, Tree };
enum class RecurrentSite { Bottleneck, Conv3_2, Conv4_2 };

std::string to_string(Recurrence r);
std::string to_string(RecurrentSite s);

/// U-Net style encoder/decoder with one recurrent layer and attention blocks.
///
/// Decoder level k (0 = first after the bottleneck) ends in layer
/// "conv{3+k}_2". The recurrent layer is followed by an attention block of
/// `recurrent_attention_depth` convs; conv3_2 gets one of
/// `skip_attention_depth` convs unless the recurrent layer sits there.
struct SegNetSpec {
  Recurrence recurrence = Recurrence::Tree;
  bool attention = true;
  RecurrentSite site = RecurrentSite::Bottleneck;
  SequentialMode sequential_mode = SequentialMode::RootToLeaf;
  std::vector<std::size_t> widths{16, 32, 64};
  std::size_t in_channels = 3;
  std::size_t frame_size = 41;
  std::size_t padded_size = 48;
  std::size_t recurrent_hidden = 32;
  std::size_t cell_kernel = 3;
  std::size_t recurrent_attention_depth = 3;
  std::size_t skip_attention_depth = 4;

  void validate() const;
  nlohmann::json to_json() const;
  static SegNetSpec from_json(const nlohmann::json& j);
};

struct SegNet {
  SegNetSpec spec;
  ParameterSet params;
};

SegNet build_segnet(const SegNetSpec& spec, unsigned long long seed);

/// Per-node foreground probability maps (1 x frame_size x frame_size).
std::vector<Var> seg_forward(Tape& tape, SegNet& model, const TreeGraph& tree, std::span<const Tensor> frames);

}  // namespace treeclstm
