#pragma once

// Dataset synthesis: MNIST IDX ingestion, Tree-Moving-MNIST and the
// synthetic tube-tree segmentation set, plus the on-disk dataset layout.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeclstm/tensor.hpp"
#include "treeclstm/treegraph.hpp"

namespace treeclstm {

// ---- IDX -------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct ImageSet {
  std::size_t rows = 0;
  std::size_t cols = 0;
  /// count * rows * cols raw bytes.
  std::vector<std::uint8_t> pixels;

  std::size_t count() const { return rows * cols == 0 ? 0 : pixels.size() / (rows * cols); }
  /// Image i scaled to [0,1], shape (1, rows, cols).
  Tensor image(std::size_t i) const;
};

/// Throws ParseError on a bad magic number or a truncated file.
ImageSet parse_idx_images(const std::filesystem::path& path);
std::vector<std::uint8_t> parse_idx_labels(const std::filesystem::path& path);
void write_idx_images(const std::filesystem::path& path, const ImageSet& images);
void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels);

/// Digits and labels from one IDX image/label pair.
struct MnistPool {
  ImageSet images;
  std::vector<std::uint8_t> labels;

  /// Loads train-images-idx3-ubyte and train-labels-idx1-ubyte from `dir`.
  /// A missing file raises an error explaining where to get MNIST.
  static MnistPool load(const std::filesystem::path& dir);
};

/// Directory holding the MNIST files: $TREECLSTM_DATA_DIR/mnist if set,
/// else data/mnist under the current directory.
std::filesystem::path default_mnist_dir();

// ---- samples ---------------------------------------------------------------

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

/// 2/3 : 2/15 : rest of `count`, so 15000 gives 10000/2000/3000. Samples are
/// assigned in index order: train first, then validation, then test.
SplitSizes split_sizes(std::size_t count);
Split split_of(std::size_t index, std::size_t count);

/// Stream seed of sample `index` in a dataset generated from `seed`.
std::uint64_t sample_seed(std::uint64_t seed, std::size_t index);

struct TreeSample {
  TreeGraph tree;
  /// Indexed by node id.
  std::vector<Tensor> frames;
  /// Classification: sorted digit classes present at each node.
  std::vector<std::vector<int>> labels;
  /// Segmentation: binary (1, h, w) mask per node.
  std::vector<Tensor> masks;
  std::uint64_t seed = 0;
};

// ---- Tree-Moving-MNIST -----------------------------------------------------

struct MnistTreeOptions {
  std::size_t frame_size = 64;
  double min_speed = 3.0;
  double max_speed = 5.0;
  /// Fraction of the MNIST pool reserved for training samples; validation
  /// and test samples draw digits from the remainder.
  double train_pool_fraction = 0.8;
};

/// One digit moving with constant speed and reflective bouncing.
struct DigitTrack {
  int digit = 0;
  std::size_t image = 0;
  double x = 0.0, y = 0.0;
  double vx = 0.0, vy = 0.0;
  /// Largest admissible top-left coordinate (frame_size - glyph size).
  double limit = 36.0;

  /// Advances one step; reflection flips the offending velocity component.
  void step();
};

/// Sample `index` of a dataset of `count` samples. Each chain of the
/// 15-node topology carries one digit of a distinct class; a node shows every
/// digit whose leaf chain lies in its subtree, each advanced by its own
/// distance from its leaf, composited by pixel max.
TreeSample gen_tree_moving_mnist_sample(const MnistPool& pool, std::uint64_t seed, std::size_t index,
                                        std::size_t count, const MnistTreeOptions& options = {});
std::vector<TreeSample> gen_tree_moving_mnist(const MnistPool& pool, std::uint64_t seed, std::size_t count,
                                              const MnistTreeOptions& options = {});

/// Number of digits at each node (= label set size).
std::vector<std::size_t> digit_counts(const TreeSample& sample);

// ---- tube trees ------------------------------------------------------------

struct TubeTreeOptions {
  std::size_t node_budget = 15;
  std::size_t frame_size = 41;
  double min_radius = 2.0;
  double max_radius = 12.0;
  /// Chance that an extension step branches instead.
  double branch_probability = 0.3;
  /// Chance that a frame is degraded, near (<= 1 edge from) a bifurcation
  /// and elsewhere.
  double degrade_near = 0.7;
  double degrade_far = 0.1;
};

/// Per-node geometry of a synthetic vessel tree.
struct TubeNode {
  double radius = 0.0;
  double cx = 0.0, cy = 0.0;
  bool degraded = false;
};

/// Random binary vessel tree rooted at node 0 (ids grow away from the root)
/// with 3-channel 41x41 cross-sections: intensity with noise and distractor
/// blobs, a constant normalization plane, and a noisy preliminary mask.
/// Labels are clean disk masks.
TreeSample gen_tube_tree_sample(std::uint64_t seed, std::size_t index, const TubeTreeOptions& options = {},
                                std::vector<TubeNode>* geometry = nullptr);
std::vector<TreeSample> gen_tube_tree(std::uint64_t seed, std::size_t count, const TubeTreeOptions& options = {});

// ---- on-disk datasets -------------------------------------------------------

enum class DatasetKind { MnistTree, TubeTree };
std::string to_string(DatasetKind k);
DatasetKind dataset_kind_from_string(const std::string& s);

struct DatasetInfo {
  DatasetKind kind = DatasetKind::MnistTree;
  std::uint64_t seed = 0;
  std::size_t count = 0;
  /// Frame shape (c, h, w) shared by all nodes.
  Shape frame;
  nlohmann::json options;

  nlohmann::json to_json() const;
  static DatasetInfo from_json(const nlohmann::json& j);
};

struct ManifestRow {
  std::string sample_id;
  Split split = Split::Train;
  std::uint64_t seed = 0;
};

std::string sample_id(std::size_t index);

/// Writes one sample directory: tree.json, frames.bin and labels.json or
/// masks.bin.
void write_sample(const std::filesystem::path& dir, const TreeSample& sample);
TreeSample read_sample(const std::filesystem::path& dir);

/// Generates `count` samples straight to `out` (refuses a non-empty `out`),
/// writing dataset.json and manifest.csv. `mnist` is required for
/// mnist-tree.
void generate_dataset(const std::filesystem::path& out, DatasetKind kind, std::uint64_t seed, std::size_t count,
                      const MnistPool* mnist, const MnistTreeOptions& mnist_options = {},
                      const TubeTreeOptions& tube_options = {});

struct Dataset {
  DatasetInfo info;
  std::vector<TreeSample> samples;
  std::vector<Split> splits;

  std::vector<const TreeSample*> split(Split s) const;
};

DatasetInfo read_dataset_info(const std::filesystem::path& dir);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// In-memory dataset with the same split assignment as generate_dataset.
Dataset make_mnist_tree_dataset(const MnistPool& pool, std::uint64_t seed, std::size_t count,
                                const MnistTreeOptions& options = {});
Dataset make_tube_tree_dataset(std::uint64_t seed, std::size_t count, const TubeTreeOptions& options = {});

}  // namespace treeclstm
