#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <queue>
#include <set>

#include "treeclstm/datagen.hpp"
#include "treeclstm/errors.hpp"

using namespace treeclstm;
namespace fs = std::filesystem;

namespace {

const fs::path kMini = fs::path(TREECLSTM_TEST_DATA) / "mini_mnist";

const MnistPool& mini_pool() {
  static const MnistPool pool = MnistPool::load(kMini);
  return pool;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("treeclstm_" + name)) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// 4-connected components of the foreground of a (1, h, w) mask.
std::size_t components(const Tensor& m) {
  const std::size_t h = m.shape().h, w = m.shape().w;
  std::vector<bool> seen(h * w, false);
  std::size_t n = 0;
  for (std::size_t s = 0; s < h * w; ++s) {
    if (seen[s] || m[s] < 0.5) continue;
    ++n;
    std::queue<std::size_t> q;
    q.push(s);
    seen[s] = true;
    while (!q.empty()) {
      const std::size_t p = q.front();
      q.pop();
      const std::size_t y = p / w, x = p % w;
      const std::size_t nb[4] = {y > 0 ? p - w : p, y + 1 < h ? p + w : p, x > 0 ? p - 1 : p, x + 1 < w ? p + 1 : p};
      for (std::size_t k : nb) {
        if (!seen[k] && m[k] >= 0.5) {
          seen[k] = true;
          q.push(k);
        }
      }
    }
  }
  return n;
}

}  // namespace

TEST(Idx, MiniMnistHeader) {
  const MnistPool& pool = mini_pool();
  EXPECT_EQ(pool.images.count(), 64u);
  EXPECT_EQ(pool.images.rows, 28u);
  EXPECT_EQ(pool.images.cols, 28u);
  EXPECT_EQ(pool.labels.size(), 64u);
  Tensor t = pool.images.image(0);
  EXPECT_EQ(t.shape(), Shape::chw(1, 28, 28));
  for (double v : t.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Idx, RoundTripIsByteIdentical) {
  TempDir tmp("idx_rt");
  fs::create_directories(tmp.path);
  ImageSet set;
  set.rows = 2;
  set.cols = 3;
  set.pixels = {0, 1, 2, 3, 254, 255, 9, 8, 7, 6, 5, 4};
  write_idx_images(tmp.path / "img", set);
  write_idx_labels(tmp.path / "lab", {3, 7});
  ImageSet back = parse_idx_images(tmp.path / "img");
  EXPECT_EQ(back.count(), 2u);
  EXPECT_EQ(back.pixels, set.pixels);
  EXPECT_EQ(parse_idx_labels(tmp.path / "lab"), (std::vector<std::uint8_t>{3, 7}));
  auto bytes = slurp(tmp.path / "img");
  ASSERT_EQ(bytes.size(), 16u + 12u);
  EXPECT_EQ(bytes[2], 0x08);
  EXPECT_EQ(bytes[3], 0x03);
  EXPECT_EQ(bytes[7], 0x02);
}

TEST(Idx, RejectsBadMagicAndTruncation) {
  TempDir tmp("idx_bad");
  fs::create_directories(tmp.path);
  write_idx_labels(tmp.path / "lab", {1, 2, 3});
  EXPECT_THROW(parse_idx_images(tmp.path / "lab"), ParseError);
  ImageSet set;
  set.rows = set.cols = 2;
  set.pixels = {1, 2, 3, 4, 5, 6, 7, 8};
  write_idx_images(tmp.path / "img", set);
  EXPECT_THROW(parse_idx_labels(tmp.path / "img"), ParseError);
  auto bytes = slurp(tmp.path / "img");
  bytes.pop_back();
  std::ofstream(tmp.path / "cut", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  EXPECT_THROW(parse_idx_images(tmp.path / "cut"), ParseError);
  EXPECT_THROW(parse_idx_images(tmp.path / "missing"), IoError);
  EXPECT_THROW(MnistPool::load(tmp.path), IoError);
}

TEST(Splits, FullAndDeskSizes) {
  SplitSizes full = split_sizes(15000);
  EXPECT_EQ(full.train, 10000u);
  EXPECT_EQ(full.val, 2000u);
  EXPECT_EQ(full.test, 3000u);
  SplitSizes desk = split_sizes(3000);
  EXPECT_EQ(desk.train, 2000u);
  EXPECT_EQ(desk.val, 400u);
  EXPECT_EQ(desk.test, 600u);
  EXPECT_EQ(split_of(0, 15000), Split::Train);
  EXPECT_EQ(split_of(9999, 15000), Split::Train);
  EXPECT_EQ(split_of(10000, 15000), Split::Val);
  EXPECT_EQ(split_of(12000, 15000), Split::Test);
  EXPECT_NE(sample_seed(1, 0), sample_seed(1, 1));
  EXPECT_NE(sample_seed(1, 0), sample_seed(2, 0));
}

TEST(DigitTrack, ReflectionAndSpeedConservation) {
  DigitTrack t;
  t.limit = 36.0;
  t.x = 35.0;
  t.y = 1.0;
  t.vx = 4.0;
  t.vy = -3.0;
  t.step();
  EXPECT_DOUBLE_EQ(t.x, 33.0);
  EXPECT_DOUBLE_EQ(t.vx, -4.0);
  EXPECT_DOUBLE_EQ(t.y, 2.0);
  EXPECT_DOUBLE_EQ(t.vy, 3.0);
  const double speed = std::hypot(t.vx, t.vy);
  for (int i = 0; i < 500; ++i) {
    t.step();
    EXPECT_GE(t.x, 0.0);
    EXPECT_LE(t.x, 36.0);
    EXPECT_GE(t.y, 0.0);
    EXPECT_LE(t.y, 36.0);
    EXPECT_DOUBLE_EQ(std::hypot(t.vx, t.vy), speed);
  }
}

TEST(MnistTree, DigitCountHistogram) {
  for (std::size_t i = 0; i < 20; ++i) {
    TreeSample s = gen_tree_moving_mnist_sample(mini_pool(), 7, i, 20);
    std::size_t hist[4] = {0, 0, 0, 0};
    for (std::size_t c : digit_counts(s)) {
      ASSERT_GE(c, 1u);
      ASSERT_LE(c, 3u);
      ++hist[c];
    }
    EXPECT_EQ(hist[1], 9u);
    EXPECT_EQ(hist[2], 3u);
    EXPECT_EQ(hist[3], 3u);
  }
}

TEST(MnistTree, MergeIsUnionOfChildren) {
  TreeSample s = gen_tree_moving_mnist_sample(mini_pool(), 3, 0, 1);
  const TreeGraph& tree = s.tree;
  for (NodeId j = 0; j < tree.node_count(); ++j) {
    if (tree.is_leaf(j)) {
      EXPECT_EQ(s.labels[j].size(), 1u);
      continue;
    }
    std::set<int> u;
    for (NodeId c : tree.children(j)) u.insert(s.labels[c].begin(), s.labels[c].end());
    EXPECT_EQ(std::vector<int>(u.begin(), u.end()), s.labels[j]) << "node " << j;
  }
  std::set<int> leaves;
  for (NodeId l : tree.leaves()) leaves.insert(s.labels[l].begin(), s.labels[l].end());
  EXPECT_EQ(std::vector<int>(leaves.begin(), leaves.end()), s.labels[tree.root()]);
  EXPECT_EQ(s.labels[tree.root()].size(), 3u);
}

TEST(MnistTree, RenderedContentMatchesLabels) {
  // Translation preserves a glyph's pixel sum, so every node of a single-digit
  // chain has its leaf's sum, and a merged node lies between the largest part
  // and the sum of its parts (max composition).
  for (std::size_t i = 0; i < 10; ++i) {
    TreeSample s = gen_tree_moving_mnist_sample(mini_pool(), 11, i, 10);
    const TreeGraph& tree = s.tree;
    std::vector<double> glyph_sum;
    for (NodeId l : tree.leaves()) glyph_sum.push_back(s.frames[l].sum());
    for (NodeId j = 0; j < tree.node_count(); ++j) {
      double total = 0.0, largest = 0.0;
      std::size_t parts = 0;
      const auto leaves = tree.leaves();
      for (std::size_t d = 0; d < leaves.size(); ++d) {
        for (std::optional<NodeId> p = leaves[d]; p; p = tree.parent(*p)) {
          if (*p == j) {
            total += glyph_sum[d];
            largest = std::max(largest, glyph_sum[d]);
            ++parts;
          }
        }
      }
      ASSERT_EQ(parts, s.labels[j].size());
      const double sum = s.frames[j].sum();
      if (parts == 1) {
        EXPECT_NEAR(sum, total, 1e-9) << "node " << j;
      } else {
        EXPECT_GE(sum, largest - 1e-9);
        EXPECT_LE(sum, total + 1e-9);
      }
      for (double v : s.frames[j].data()) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
    }
  }
}

TEST(MnistTree, Deterministic) {
  TreeSample a = gen_tree_moving_mnist_sample(mini_pool(), 5, 2, 10);
  TreeSample b = gen_tree_moving_mnist_sample(mini_pool(), 5, 2, 10);
  TreeSample c = gen_tree_moving_mnist_sample(mini_pool(), 6, 2, 10);
  for (std::size_t j = 0; j < a.frames.size(); ++j) EXPECT_EQ(max_abs_diff(a.frames[j], b.frames[j]), 0.0);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_GT(max_abs_diff(a.frames[0], c.frames[0]), 0.0);
}

TEST(TubeTree, GeometryInvariants) {
  TubeTreeOptions opt;
  for (std::size_t i = 0; i < 30; ++i) {
    std::vector<TubeNode> geo;
    TreeSample s = gen_tube_tree_sample(9, i, opt, &geo);
    const TreeGraph& tree = s.tree;
    ASSERT_EQ(tree.node_count(), opt.node_budget);
    ASSERT_EQ(tree.root(), 0u);
    bool any_branch = false;
    for (NodeId j = 0; j < tree.node_count(); ++j) {
      any_branch = any_branch || tree.is_branching(j);
      EXPECT_LE(tree.children(j).size(), 2u);
      EXPECT_GE(geo[j].radius, opt.min_radius);
      EXPECT_LE(geo[j].radius, opt.max_radius);
      if (auto p = tree.parent(j); p && !tree.is_branching(*p)) {
        EXPECT_LE(std::abs(geo[*p].radius - geo[j].radius), 1.0 + 1e-12);
      }
    }
    EXPECT_TRUE(any_branch);
  }
}

TEST(TubeTree, FramesAndMasks) {
  for (std::size_t i = 0; i < 10; ++i) {
    std::vector<TubeNode> geo;
    TreeSample s = gen_tube_tree_sample(4, i, {}, &geo);
    ASSERT_EQ(s.frames.size(), s.tree.node_count());
    ASSERT_EQ(s.masks.size(), s.tree.node_count());
    for (std::size_t j = 0; j < s.frames.size(); ++j) {
      const Tensor& f = s.frames[j];
      ASSERT_EQ(f.shape(), Shape::chw(3, 41, 41));
      ASSERT_EQ(s.masks[j].shape(), Shape::chw(1, 41, 41));
      for (double v : f.data()) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
      for (std::size_t k = 0; k < 41 * 41; ++k) {
        EXPECT_EQ(f.at(1, k / 41, k % 41), f.at(1, 0, 0));
        EXPECT_TRUE(s.masks[j][k] == 0.0 || s.masks[j][k] == 1.0);
      }
      EXPECT_EQ(components(s.masks[j]), 1u);
      const double area = s.masks[j].sum();
      const double disk = std::numbers::pi * geo[j].radius * geo[j].radius;
      EXPECT_NEAR(area, disk, 2.0 * std::numbers::pi * geo[j].radius + 4.0);
    }
  }
}

TEST(TubeTree, Deterministic) {
  TreeSample a = gen_tube_tree_sample(1, 3);
  TreeSample b = gen_tube_tree_sample(1, 3);
  EXPECT_EQ(a.tree, b.tree);
  for (std::size_t j = 0; j < a.frames.size(); ++j) {
    EXPECT_EQ(max_abs_diff(a.frames[j], b.frames[j]), 0.0);
    EXPECT_EQ(max_abs_diff(a.masks[j], b.masks[j]), 0.0);
  }
  TubeTreeOptions tiny;
  tiny.node_budget = 2;
  EXPECT_THROW(gen_tube_tree_sample(1, 0, tiny), ConfigError);
}

TEST(Dataset, GenerateAndLoadTubeTrees) {
  TempDir tmp("ds_tube");
  TubeTreeOptions opt;
  opt.node_budget = 5;
  generate_dataset(tmp.path, DatasetKind::TubeTree, 3, 10, nullptr, {}, opt);
  std::size_t dirs = 0;
  for (const auto& e : fs::directory_iterator(tmp.path)) dirs += e.is_directory();
  EXPECT_EQ(dirs, 10u);
  auto rows = read_manifest(tmp.path);
  ASSERT_EQ(rows.size(), 10u);
  Dataset d = load_dataset(tmp.path);
  EXPECT_EQ(d.info.kind, DatasetKind::TubeTree);
  EXPECT_EQ(d.info.frame, Shape::chw(3, 41, 41));
  Dataset mem = make_tube_tree_dataset(3, 10, opt);
  ASSERT_EQ(d.samples.size(), mem.samples.size());
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    EXPECT_EQ(d.splits[i], mem.splits[i]);
    EXPECT_EQ(d.samples[i].seed, mem.samples[i].seed);
    EXPECT_EQ(d.samples[i].tree, mem.samples[i].tree);
    for (std::size_t j = 0; j < d.samples[i].frames.size(); ++j) {
      EXPECT_EQ(max_abs_diff(d.samples[i].frames[j], mem.samples[i].frames[j]), 0.0);
      EXPECT_EQ(max_abs_diff(d.samples[i].masks[j], mem.samples[i].masks[j]), 0.0);
    }
  }
  EXPECT_THROW(generate_dataset(tmp.path, DatasetKind::TubeTree, 3, 1, nullptr), IoError);
}

TEST(Dataset, MnistTreeGenerationIsByteIdentical) {
  TempDir a("ds_mnist_a"), b("ds_mnist_b");
  generate_dataset(a.path, DatasetKind::MnistTree, 7, 6, &mini_pool());
  generate_dataset(b.path, DatasetKind::MnistTree, 7, 6, &mini_pool());
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path rel = fs::relative(e.path(), a.path);
    EXPECT_EQ(slurp(e.path()), slurp(b.path / rel)) << rel;
  }
  EXPECT_EQ(files, 2u + 6u * 3u);
  Dataset d = load_dataset(a.path);
  TreeSample s = gen_tree_moving_mnist_sample(mini_pool(), 7, 4, 6);
  EXPECT_EQ(d.samples[4].labels, s.labels);
  EXPECT_EQ(d.splits[4], Split::Test);
  EXPECT_THROW(generate_dataset(a.path / "x", DatasetKind::MnistTree, 7, 1, nullptr), IoError);
}
