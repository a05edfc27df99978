#include "treeclstm/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "treeclstm/errors.hpp"

namespace treeclstm {

namespace fs = std::filesystem;

// ---- IDX -------------------------------------------------------------------

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

void put_be32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                              static_cast<char>(v)};
  out.write(b.data(), 4);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace

Tensor ImageSet::image(std::size_t i) const {
  if (i >= count()) throw std::out_of_range("image index " + std::to_string(i));
  Tensor t(Shape::chw(1, rows, cols));
  const std::size_t n = rows * cols;
  for (std::size_t k = 0; k < n; ++k) t[k] = pixels[i * n + k] / 255.0;
  return t;
}

ImageSet parse_idx_images(const fs::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 16) throw ParseError(path.string() + ": truncated IDX header");
  const std::uint32_t magic = be32(bytes, 0);
  if (magic != kIdxImageMagic) {
    std::ostringstream msg;
    msg << path.string() << ": bad IDX image magic 0x" << std::hex << magic;
    throw ParseError(msg.str());
  }
  const std::size_t count = be32(bytes, 4);
  ImageSet set;
  set.rows = be32(bytes, 8);
  set.cols = be32(bytes, 12);
  const std::size_t need = count * set.rows * set.cols;
  if (bytes.size() - 16 < need) {
    throw ParseError(path.string() + ": truncated, header promises " + std::to_string(count) + " images");
  }
  set.pixels.assign(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(need));
  return set;
}

std::vector<std::uint8_t> parse_idx_labels(const fs::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 8) throw ParseError(path.string() + ": truncated IDX header");
  const std::uint32_t magic = be32(bytes, 0);
  if (magic != kIdxLabelMagic) {
    std::ostringstream msg;
    msg << path.string() << ": bad IDX label magic 0x" << std::hex << magic;
    throw ParseError(msg.str());
  }
  const std::size_t count = be32(bytes, 4);
  if (bytes.size() - 8 < count) {
    throw ParseError(path.string() + ": truncated, header promises " + std::to_string(count) + " labels");
  }
  return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count)};
}

void write_idx_images(const fs::path& path, const ImageSet& images) {
  auto out = open_out(path);
  put_be32(out, kIdxImageMagic);
  put_be32(out, static_cast<std::uint32_t>(images.count()));
  put_be32(out, static_cast<std::uint32_t>(images.rows));
  put_be32(out, static_cast<std::uint32_t>(images.cols));
  out.write(reinterpret_cast<const char*>(images.pixels.data()), static_cast<std::streamsize>(images.pixels.size()));
}

void write_idx_labels(const fs::path& path, const std::vector<std::uint8_t>& labels) {
  auto out = open_out(path);
  put_be32(out, kIdxLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

MnistPool MnistPool::load(const fs::path& dir) {
  const fs::path images = dir / "train-images-idx3-ubyte";
  const fs::path labels = dir / "train-labels-idx1-ubyte";
  for (const auto& p : {images, labels}) {
    if (!fs::exists(p)) {
      throw IoError("MNIST file not found: " + p.string() +
                    "\nDownload train-images-idx3-ubyte.gz and train-labels-idx1-ubyte.gz from "
                    "http://yann.lecun.com/exdb/mnist/, gunzip them into " +
                    dir.string() + " (or point TREECLSTM_DATA_DIR at a directory containing mnist/).");
    }
  }
  MnistPool pool{parse_idx_images(images), parse_idx_labels(labels)};
  if (pool.images.count() != pool.labels.size()) {
    throw ParseError("MNIST image/label count mismatch: " + std::to_string(pool.images.count()) + " vs " +
                     std::to_string(pool.labels.size()));
  }
  for (auto l : pool.labels) {
    if (l > 9) throw ParseError("MNIST label out of range: " + std::to_string(l));
  }
  return pool;
}

fs::path default_mnist_dir() {
  if (const char* root = std::getenv("TREECLSTM_DATA_DIR"); root != nullptr && *root != '\0') {
    return fs::path(root) / "mnist";
  }
  return fs::path("data") / "mnist";
}

// ---- splits and seeds --------------------------------------------------------

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ParseError("unknown split: " + s);
}

SplitSizes split_sizes(std::size_t count) {
  SplitSizes s;
  s.train = count * 2 / 3;
  s.val = count * 2 / 15;
  s.test = count - s.train - s.val;
  return s;
}

Split split_of(std::size_t index, std::size_t count) {
  if (index >= count) throw std::out_of_range("sample index " + std::to_string(index) + " >= " + std::to_string(count));
  const SplitSizes s = split_sizes(count);
  if (index < s.train) return Split::Train;
  if (index < s.train + s.val) return Split::Val;
  return Split::Test;
}

std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) {
  // splitmix64 finalizer over (seed, index)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(index) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---- Tree-Moving-MNIST -----------------------------------------------------

void DigitTrack::step() {
  auto move = [this](double& p, double& v) {
    p += v;
    // Repeated reflection keeps p in [0, limit] even for |v| > limit.
    while (p < 0.0 || p > limit) {
      if (p < 0.0) p = -p;
      if (p > limit) p = 2.0 * limit - p;
      v = -v;
    }
  };
  move(x, vx);
  move(y, vy);
}

namespace {

std::size_t depth_of(const TreeGraph& tree, NodeId j) {
  std::size_t d = 0;
  for (auto p = tree.parent(j); p; p = tree.parent(*p)) ++d;
  return d;
}

bool in_subtree(const TreeGraph& tree, NodeId node, NodeId top) {
  for (std::optional<NodeId> p = node; p; p = tree.parent(*p)) {
    if (*p == top) return true;
  }
  return false;
}

void render_glyph(Tensor& frame, const ImageSet& images, std::size_t image, double x, double y) {
  const auto ox = static_cast<std::size_t>(std::lround(x));
  const auto oy = static_cast<std::size_t>(std::lround(y));
  const std::size_t rows = images.rows, cols = images.cols;
  const std::uint8_t* px = images.pixels.data() + image * rows * cols;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double& dst = frame.at(0, oy + r, ox + c);
      dst = std::max(dst, px[r * cols + c] / 255.0);
    }
  }
}

}  // namespace

TreeSample gen_tree_moving_mnist_sample(const MnistPool& pool, std::uint64_t seed, std::size_t index,
                                        std::size_t count, const MnistTreeOptions& options) {
  const ImageSet& images = pool.images;
  if (images.rows > options.frame_size || images.cols > options.frame_size) {
    throw ConfigError("glyphs larger than the frame");
  }
  if (!(options.min_speed > 0.0 && options.min_speed < options.max_speed)) {
    throw ConfigError("speed range must satisfy 0 < min < max");
  }
  const std::size_t n = images.count();
  const auto cut = static_cast<std::size_t>(std::floor(n * options.train_pool_fraction));
  const bool train = split_of(index, count) == Split::Train;
  const std::size_t lo = train ? 0 : cut, hi = train ? cut : n;

  std::array<std::vector<std::size_t>, 10> by_class;
  for (std::size_t i = lo; i < hi; ++i) by_class[pool.labels[i]].push_back(i);

  TreeSample s;
  s.seed = sample_seed(seed, index);
  s.tree = tree_moving_mnist_topology();
  std::mt19937_64 rng(s.seed);

  std::vector<int> classes(10);
  for (int d = 0; d < 10; ++d) classes[d] = d;
  for (std::size_t i = 0; i < 3; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, classes.size() - 1);
    std::swap(classes[i], classes[pick(rng)]);
  }

  const std::vector<NodeId> leaves = s.tree.leaves();
  const double limit = static_cast<double>(options.frame_size - std::max(images.rows, images.cols));
  std::uniform_real_distribution<double> pos(0.0, limit);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> speed(options.min_speed, options.max_speed);
  std::vector<DigitTrack> tracks;
  for (std::size_t d = 0; d < leaves.size(); ++d) {
    const auto& candidates = by_class[classes[d]];
    if (candidates.empty()) {
      throw IoError("MNIST pool has no digit " + std::to_string(classes[d]) + " in the " +
                    (train ? "training" : "held-out") + " partition");
    }
    DigitTrack t;
    t.digit = classes[d];
    t.image = candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
    t.limit = limit;
    t.x = pos(rng);
    t.y = pos(rng);
    const double a = angle(rng), v = speed(rng);
    t.vx = v * std::cos(a);
    t.vy = v * std::sin(a);
    tracks.push_back(t);
  }

  const std::size_t nodes = s.tree.node_count();
  s.frames.assign(nodes, Tensor(Shape::chw(1, options.frame_size, options.frame_size)));
  s.labels.assign(nodes, {});
  for (std::size_t d = 0; d < leaves.size(); ++d) {
    // Positions along the digit's path from its leaf upwards.
    std::vector<std::pair<double, double>> path;
    DigitTrack t = tracks[d];
    const std::size_t leaf_depth = depth_of(s.tree, leaves[d]);
    for (std::size_t step = 0; step <= leaf_depth; ++step) {
      path.emplace_back(t.x, t.y);
      t.step();
    }
    for (NodeId j = 0; j < nodes; ++j) {
      if (!in_subtree(s.tree, leaves[d], j)) continue;
      const auto [x, y] = path[leaf_depth - depth_of(s.tree, j)];
      render_glyph(s.frames[j], images, tracks[d].image, x, y);
      s.labels[j].push_back(tracks[d].digit);
    }
  }
  for (auto& l : s.labels) std::sort(l.begin(), l.end());
  return s;
}

std::vector<TreeSample> gen_tree_moving_mnist(const MnistPool& pool, std::uint64_t seed, std::size_t count,
                                              const MnistTreeOptions& options) {
  std::vector<TreeSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_tree_moving_mnist_sample(pool, seed, i, count, options));
  return out;
}

std::vector<std::size_t> digit_counts(const TreeSample& sample) {
  std::vector<std::size_t> out;
  for (const auto& l : sample.labels) out.push_back(l.size());
  return out;
}

// ---- tube trees ------------------------------------------------------------

namespace {

struct Blob {
  double cx, cy, r;
};

bool inside(const Blob& b, double x, double y) {
  const double dx = x - b.cx, dy = y - b.cy;
  return dx * dx + dy * dy <= b.r * b.r;
}

}  // namespace

TreeSample gen_tube_tree_sample(std::uint64_t seed, std::size_t index, const TubeTreeOptions& opt,
                                std::vector<TubeNode>* geometry) {
  if (opt.node_budget < 3) throw ConfigError("tube tree node budget must be >= 3");
  if (!(opt.min_radius > 0.0 && opt.min_radius <= opt.max_radius)) throw ConfigError("invalid radius range");
  const double center = (static_cast<double>(opt.frame_size) - 1.0) / 2.0;
  if (opt.max_radius + 6.0 > center) throw ConfigError("frame too small for the radius range");

  TreeSample s;
  s.seed = sample_seed(seed, index);
  std::mt19937_64 rng(s.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * unit(rng); };
  auto clamp_r = [&](double r) { return std::clamp(r, opt.min_radius, opt.max_radius); };
  auto clamp_c = [&](double c) { return std::clamp(c, center - 4.0, center + 4.0); };

  // Topology and geometry, grown from the root.
  std::vector<std::vector<NodeId>> children(1);
  std::vector<std::size_t> depth{0};
  std::vector<TubeNode> geo{{uni(std::max(opt.min_radius, opt.max_radius - 4.0), opt.max_radius),
                             center + uni(-2.0, 2.0), center + uni(-2.0, 2.0), false}};
  std::vector<NodeId> tips{0};
  const std::size_t forced_depth = 1 + static_cast<std::size_t>(unit(rng) * 3.0);
  bool branched = false;
  auto add_node = [&](NodeId parent, double radius) {
    const NodeId id = children.size();
    children.emplace_back();
    children[parent].push_back(id);
    depth.push_back(depth[parent] + 1);
    geo.push_back({radius, clamp_c(geo[parent].cx + uni(-1.0, 1.0)), clamp_c(geo[parent].cy + uni(-1.0, 1.0)), false});
    tips.push_back(id);
  };
  while (children.size() < opt.node_budget) {
    const std::size_t k = std::min(tips.size() - 1, static_cast<std::size_t>(unit(rng) * tips.size()));
    const NodeId p = tips[k];
    tips.erase(tips.begin() + static_cast<std::ptrdiff_t>(k));
    const std::size_t remaining = opt.node_budget - children.size();
    const bool want = branched ? unit(rng) < opt.branch_probability
                               : (depth[p] + 1 >= forced_depth || remaining <= 2);
    if (remaining >= 2 && want) {
      // Murray's law: r_p^3 = r_1^3 + r_2^3.
      const double a = uni(0.65, 0.9);
      const double rp = geo[p].radius;
      add_node(p, clamp_r(rp * a));
      add_node(p, clamp_r(rp * std::cbrt(1.0 - a * a * a)));
      branched = true;
    } else {
      add_node(p, clamp_r(geo[p].radius + uni(-1.0, 0.5)));
    }
  }
  s.tree = TreeGraph(0, children);
  const std::size_t nodes = s.tree.node_count();

  std::vector<bool> near(nodes, false);
  for (NodeId j : bifurcation_neighborhood(s.tree, 1)) near[j] = true;
  for (NodeId j = 0; j < nodes; ++j) geo[j].degraded = unit(rng) < (near[j] ? opt.degrade_near : opt.degrade_far);

  const double vessel = uni(0.6, 0.8);
  const double background = uni(0.15, 0.3);
  const std::size_t fsz = opt.frame_size;
  std::normal_distribution<double> gauss(0.0, 1.0);

  for (NodeId j = 0; j < nodes; ++j) {
    const TubeNode& g = geo[j];
    const Blob disk{g.cx, g.cy, g.radius};

    // Neighbouring branch visible in the cross-section near a bifurcation.
    std::optional<Blob> sibling;
    NodeId other = j;
    if (auto p = s.tree.parent(j); p && s.tree.is_branching(*p)) {
      for (NodeId c : s.tree.children(*p)) {
        if (c != j) other = c;
      }
    } else if (s.tree.is_branching(j)) {
      other = s.tree.children(j).back();
    }
    if (other != j) {
      const double rs = geo[other].radius;
      const double phi = uni(0.0, 2.0 * std::numbers::pi);
      const double dist = g.radius + rs + uni(0.5, 3.0);
      sibling = Blob{g.cx + dist * std::cos(phi), g.cy + dist * std::sin(phi), rs};
    }

    std::vector<Blob> distractors;
    const int n_distract = static_cast<int>(unit(rng) * 3.0);
    for (int d = 0; d < n_distract; ++d) {
      const double r = uni(1.5, 3.5);
      const double phi = uni(0.0, 2.0 * std::numbers::pi);
      const double dist = g.radius + r + uni(2.0, 10.0);
      distractors.push_back({g.cx + dist * std::cos(phi), g.cy + dist * std::sin(phi), r});
    }
    std::vector<double> distract_level;
    for (std::size_t d = 0; d < distractors.size(); ++d) distract_level.push_back(uni(0.5, 1.0));

    const double contrast = g.degraded ? background + (vessel - background) * uni(0.15, 0.35) : vessel;
    const double noise = g.degraded ? 0.15 : 0.06;
    const double sibling_level = vessel * uni(0.9, 1.1);

    // Preliminary mask: perturbed disk plus part of the sibling, with holes.
    const bool dropped = g.degraded && unit(rng) < 0.3;
    const double jitter = g.degraded ? 3.0 : 1.0;
    const Blob prelim{g.cx + uni(-jitter, jitter), g.cy + uni(-jitter, jitter),
                      std::max(1.0, g.radius + uni(-1.5, 1.5))};
    const bool prelim_sibling = sibling.has_value() && unit(rng) < 0.7;
    const int n_holes = g.degraded ? 4 + static_cast<int>(unit(rng) * 5.0) : static_cast<int>(unit(rng) * 4.0);
    struct Hole {
      double x, y, side;
    };
    std::vector<Hole> holes;
    for (int h = 0; h < n_holes; ++h) {
      holes.push_back({prelim.cx + uni(-prelim.r, prelim.r), prelim.cy + uni(-prelim.r, prelim.r),
                       g.degraded ? uni(3.0, 7.0) : uni(2.0, 5.0)});
    }

    Tensor frame(Shape::chw(3, fsz, fsz));
    Tensor mask(Shape::chw(1, fsz, fsz));
    for (std::size_t y = 0; y < fsz; ++y) {
      for (std::size_t x = 0; x < fsz; ++x) {
        const double fx = static_cast<double>(x), fy = static_cast<double>(y);
        double v = background;
        for (std::size_t d = 0; d < distractors.size(); ++d) {
          if (inside(distractors[d], fx, fy)) v = distract_level[d];
        }
        if (sibling && inside(*sibling, fx, fy)) v = sibling_level;
        const bool in_disk = inside(disk, fx, fy);
        if (in_disk) v = contrast;
        v += noise * gauss(rng);
        frame.at(0, y, x) = std::clamp(v, 0.0, 1.0);
        frame.at(1, y, x) = vessel;

        bool pm = !dropped && (inside(prelim, fx, fy) || (prelim_sibling && inside(*sibling, fx, fy)));
        for (const Hole& h : holes) {
          if (std::abs(fx - h.x) <= h.side / 2 && std::abs(fy - h.y) <= h.side / 2) pm = false;
        }
        if (unit(rng) < 0.01) pm = true;
        frame.at(2, y, x) = pm ? 1.0 : 0.0;
        mask.at(0, y, x) = in_disk ? 1.0 : 0.0;
      }
    }
    s.frames.push_back(std::move(frame));
    s.masks.push_back(std::move(mask));
  }
  if (geometry != nullptr) *geometry = geo;
  return s;
}

std::vector<TreeSample> gen_tube_tree(std::uint64_t seed, std::size_t count, const TubeTreeOptions& options) {
  std::vector<TreeSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_tube_tree_sample(seed, i, options));
  return out;
}

// ---- on-disk datasets -------------------------------------------------------

std::string to_string(DatasetKind k) { return k == DatasetKind::MnistTree ? "mnist-tree" : "tube-tree"; }

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "mnist-tree") return DatasetKind::MnistTree;
  if (s == "tube-tree") return DatasetKind::TubeTree;
  throw ConfigError("unknown dataset kind: " + s + " (expected mnist-tree or tube-tree)");
}

nlohmann::json DatasetInfo::to_json() const {
  return {{"kind", to_string(kind)},
          {"seed", seed},
          {"count", count},
          {"frame", {frame.c, frame.h, frame.w}},
          {"options", options}};
}

DatasetInfo DatasetInfo::from_json(const nlohmann::json& j) {
  DatasetInfo info;
  try {
    info.kind = dataset_kind_from_string(j.at("kind").get<std::string>());
    info.seed = j.at("seed").get<std::uint64_t>();
    info.count = j.at("count").get<std::size_t>();
    const auto f = j.at("frame").get<std::vector<std::size_t>>();
    if (f.size() != 3) throw ParseError("dataset.json: frame must list c, h, w");
    info.frame = Shape::chw(f[0], f[1], f[2]);
    if (j.contains("options")) info.options = j.at("options");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset.json: ") + e.what());
  }
  return info;
}

std::string sample_id(std::size_t index) {
  std::string s = std::to_string(index);
  return std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s;
}

void write_sample(const fs::path& dir, const TreeSample& sample) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "tree.json");
    if (!out) throw IoError("cannot write " + (dir / "tree.json").string());
    out << sample.tree.to_json().dump() << "\n";
  }
  {
    auto out = open_out(dir / "frames.bin");
    for (const Tensor& f : sample.frames) write_record(out, f);
  }
  if (!sample.masks.empty()) {
    auto out = open_out(dir / "masks.bin");
    for (const Tensor& m : sample.masks) write_record(out, m);
  } else {
    std::ofstream out(dir / "labels.json");
    if (!out) throw IoError("cannot write " + (dir / "labels.json").string());
    out << nlohmann::json{{"labels", sample.labels}}.dump() << "\n";
  }
}

namespace {

std::vector<Tensor> read_records(const fs::path& path, std::size_t n) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<Tensor> out;
  try {
    for (std::size_t i = 0; i < n; ++i) out.push_back(read_record(in));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError(path.string() + ": trailing bytes");
  return out;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace

TreeSample read_sample(const fs::path& dir) {
  TreeSample s;
  s.tree = TreeGraph::from_json(read_json(dir / "tree.json"));
  const std::size_t n = s.tree.node_count();
  s.frames = read_records(dir / "frames.bin", n);
  if (fs::exists(dir / "masks.bin")) {
    s.masks = read_records(dir / "masks.bin", n);
  } else {
    const auto j = read_json(dir / "labels.json");
    try {
      s.labels = j.at("labels").get<std::vector<std::vector<int>>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError((dir / "labels.json").string() + ": " + e.what());
    }
    if (s.labels.size() != n) throw ParseError((dir / "labels.json").string() + ": wrong number of nodes");
  }
  return s;
}

void generate_dataset(const fs::path& out, DatasetKind kind, std::uint64_t seed, std::size_t count,
                      const MnistPool* mnist, const MnistTreeOptions& mnist_options,
                      const TubeTreeOptions& tube_options) {
  if (fs::exists(out) && !(fs::is_directory(out) && fs::is_empty(out))) {
    throw IoError("refusing to write into non-empty " + out.string());
  }
  if (kind == DatasetKind::MnistTree && mnist == nullptr) throw IoError("mnist-tree generation needs MNIST");
  fs::create_directories(out);
  std::ofstream manifest(out / "manifest.csv");
  if (!manifest) throw IoError("cannot write " + (out / "manifest.csv").string());
  manifest << "sample_id,split,seed\n";
  DatasetInfo info;
  info.kind = kind;
  info.seed = seed;
  info.count = count;
  if (kind == DatasetKind::MnistTree) {
    info.frame = Shape::chw(1, mnist_options.frame_size, mnist_options.frame_size);
    info.options = {{"frame_size", mnist_options.frame_size},
                    {"min_speed", mnist_options.min_speed},
                    {"max_speed", mnist_options.max_speed},
                    {"train_pool_fraction", mnist_options.train_pool_fraction}};
  } else {
    info.frame = Shape::chw(3, tube_options.frame_size, tube_options.frame_size);
    info.options = {{"node_budget", tube_options.node_budget},
                    {"frame_size", tube_options.frame_size},
                    {"min_radius", tube_options.min_radius},
                    {"max_radius", tube_options.max_radius},
                    {"branch_probability", tube_options.branch_probability},
                    {"degrade_near", tube_options.degrade_near},
                    {"degrade_far", tube_options.degrade_far}};
  }
  for (std::size_t i = 0; i < count; ++i) {
    const TreeSample s = kind == DatasetKind::MnistTree
                             ? gen_tree_moving_mnist_sample(*mnist, seed, i, count, mnist_options)
                             : gen_tube_tree_sample(seed, i, tube_options);
    write_sample(out / sample_id(i), s);
    manifest << sample_id(i) << ',' << to_string(split_of(i, count)) << ',' << s.seed << '\n';
  }
  std::ofstream(out / "dataset.json") << info.to_json().dump(2) << "\n";
}

DatasetInfo read_dataset_info(const fs::path& dir) { return DatasetInfo::from_json(read_json(dir / "dataset.json")); }

std::vector<ManifestRow> read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.csv");
  if (!in) throw IoError("cannot open " + (dir / "manifest.csv").string());
  std::string line;
  std::getline(in, line);
  if (line != "sample_id,split,seed") throw ParseError("manifest.csv: unexpected header '" + line + "'");
  std::vector<ManifestRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, split, seed;
    if (!std::getline(ss, id, ',') || !std::getline(ss, split, ',') || !std::getline(ss, seed)) {
      throw ParseError("manifest.csv line " + std::to_string(lineno) + ": expected 3 fields");
    }
    try {
      rows.push_back({id, split_from_string(split), std::stoull(seed)});
    } catch (const std::logic_error&) {
      throw ParseError("manifest.csv line " + std::to_string(lineno) + ": bad field");
    }
  }
  return rows;
}

std::vector<const TreeSample*> Dataset::split(Split s) const {
  std::vector<const TreeSample*> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (splits[i] == s) out.push_back(&samples[i]);
  }
  return out;
}

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  Dataset d;
  d.info = read_dataset_info(dir);
  for (const ManifestRow& row : read_manifest(dir)) {
    TreeSample s = read_sample(dir / row.sample_id);
    s.seed = row.seed;
    for (const Tensor& f : s.frames) {
      if (!(f.shape() == d.info.frame)) {
        throw ParseError(row.sample_id + ": frame " + f.shape().str() + " does not match dataset frame " +
                         d.info.frame.str());
      }
    }
    d.samples.push_back(std::move(s));
    d.splits.push_back(row.split);
  }
  return d;
}

namespace {

Dataset with_splits(DatasetInfo info, std::vector<TreeSample> samples) {
  Dataset d;
  d.info = std::move(info);
  for (std::size_t i = 0; i < samples.size(); ++i) d.splits.push_back(split_of(i, samples.size()));
  d.samples = std::move(samples);
  return d;
}

}  // namespace

Dataset make_mnist_tree_dataset(const MnistPool& pool, std::uint64_t seed, std::size_t count,
                                const MnistTreeOptions& options) {
  DatasetInfo info{DatasetKind::MnistTree, seed, count, Shape::chw(1, options.frame_size, options.frame_size), {}};
  return with_splits(info, gen_tree_moving_mnist(pool, seed, count, options));
}

Dataset make_tube_tree_dataset(std::uint64_t seed, std::size_t count, const TubeTreeOptions& options) {
  DatasetInfo info{DatasetKind::TubeTree, seed, count, Shape::chw(3, options.frame_size, options.frame_size), {}};
  return with_splits(info, gen_tube_tree(seed, count, options));
}

}  // namespace treeclstm
