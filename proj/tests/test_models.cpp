#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "treeclstm/errors.hpp"
#include "treeclstm/gradcheck.hpp"
#include "treeclstm/models.hpp"

using namespace treeclstm;
using treeclstm::test::fill_random;
using treeclstm::test::random_tensor;

namespace {

ClassifierSpec small_classifier(ClassifierVariant v) {
  ClassifierSpec s;
  s.variant = v;
  s.conv1_channels = 3;
  s.conv2_channels = 4;
  s.conv3_channels = 4;
  s.recurrent_hidden = 4;
  s.vector_hidden = 8;
  s.dense_hidden = 8;
  return s;
}

std::vector<Tensor> random_frames(std::mt19937_64& rng, std::size_t n, Shape shape) {
  std::vector<Tensor> frames;
  for (std::size_t i = 0; i < n; ++i) frames.push_back(random_tensor(rng, shape, 0.0, 1.0));
  return frames;
}

std::vector<Tensor> run_classifier(Classifier& m, const TreeGraph& tree, const std::vector<Tensor>& frames) {
  Tape tape;
  std::vector<Tensor> out;
  for (Var v : classify_tree(tape, m, tree, frames)) out.push_back(v.value());
  return out;
}

SegNetSpec small_segnet() {
  SegNetSpec s;
  s.widths = {4, 6, 8};
  s.recurrent_hidden = 4;
  return s;
}

std::vector<Tensor> run_segnet(SegNet& m, const TreeGraph& tree, const std::vector<Tensor>& frames) {
  Tape tape;
  std::vector<Tensor> out;
  for (Var v : seg_forward(tape, m, tree, frames)) out.push_back(v.value());
  return out;
}

}  // namespace

TEST(Attention, ZeroWeightsGiveHalfMask) {
  std::mt19937_64 rng(1);
  ParameterSet params;
  add_attention_params(params, "att", 3, 3);
  Tape tape;
  Tensor f = random_tensor(rng, Shape::chw(3, 5, 5));
  AttentionMaps maps;
  Var out = attention_block(tape, params, "att", tape.constant(f), 3, &maps);
  ASSERT_EQ(out.shape(), Shape::chw(6, 5, 5));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 5; ++y)
      for (std::size_t x = 0; x < 5; ++x) {
        EXPECT_EQ(out.value().at(c, y, x), f.at(c, y, x));
        EXPECT_DOUBLE_EQ(out.value().at(c + 3, y, x), 0.5 * f.at(c, y, x));
        EXPECT_DOUBLE_EQ(maps.alpha.value().at(c, y, x), 0.5);
      }
}

TEST(Attention, ZeroInputGivesZeros) {
  std::mt19937_64 rng(2);
  ParameterSet params;
  add_attention_params(params, "att", 2, 4);
  fill_random(params, rng, 0.5);
  Tape tape;
  Var out = attention_block(tape, params, "att", tape.constant(Tensor(Shape::chw(2, 4, 4))), 4);
  EXPECT_EQ(out.value().max_abs(), 0.0);
}

TEST(Attention, AttendedPartBoundedByInput) {
  std::mt19937_64 rng(3);
  ParameterSet params;
  add_attention_params(params, "att", 3, 3);
  fill_random(params, rng, 1.0);
  Tape tape;
  Tensor f = random_tensor(rng, Shape::chw(3, 6, 6), -3.0, 3.0);
  AttentionMaps maps;
  Var out = attention_block(tape, params, "att", tape.constant(f), 3, &maps);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 6; ++x) {
        const double a = maps.alpha.value().at(c, y, x);
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0);
        EXPECT_EQ(out.value().at(c, y, x), f.at(c, y, x));
        EXPECT_LE(std::abs(out.value().at(c + 3, y, x)), std::abs(f.at(c, y, x)));
        EXPECT_DOUBLE_EQ(out.value().at(c + 3, y, x), a * f.at(c, y, x));
      }
}

TEST(Attention, RejectsZeroDepth) {
  ParameterSet params;
  EXPECT_THROW(add_attention_params(params, "att", 3, 0), ConfigError);
}

TEST(Classifier, FeatureSize) {
  ClassifierSpec s;
  EXPECT_EQ(s.feature_size(), 11u);
  s.input_pool = 1;
  EXPECT_EQ(s.feature_size(), 3u);
  s.input_pool = 2;
  EXPECT_THROW(s.feature_size(), ConfigError);
  s.input_pool = 0;
  s.frame_size = 63;
  EXPECT_THROW(s.feature_size(), ConfigError);
}

TEST(Classifier, VariantNames) {
  for (auto v : {ClassifierVariant::Cnn, ClassifierVariant::Clstm, ClassifierVariant::TreeLstm,
                 ClassifierVariant::TreeClstm}) {
    EXPECT_EQ(classifier_variant_from_string(to_string(v)), v);
  }
  EXPECT_THROW(classifier_variant_from_string("att-treeclstm"), ConfigError);
}

TEST(Classifier, SpecJsonRoundTrip) {
  ClassifierSpec s = small_classifier(ClassifierVariant::TreeLstm);
  ClassifierSpec r = ClassifierSpec::from_json(s.to_json());
  EXPECT_EQ(r.to_json(), s.to_json());
}

TEST(Classifier, SameSeedSameOutputs) {
  TreeGraph tree = tree_moving_mnist_topology();
  std::mt19937_64 rng(4);
  auto frames = random_frames(rng, tree.node_count(), Shape::chw(1, 64, 64));
  Classifier a = build_classifier(small_classifier(ClassifierVariant::TreeClstm), 9);
  Classifier b = build_classifier(small_classifier(ClassifierVariant::TreeClstm), 9);
  auto oa = run_classifier(a, tree, frames);
  auto ob = run_classifier(b, tree, frames);
  for (std::size_t j = 0; j < oa.size(); ++j) EXPECT_EQ(max_abs_diff(oa[j], ob[j]), 0.0);
}

TEST(Classifier, InitStatistics) {
  ClassifierSpec s;
  s.variant = ClassifierVariant::TreeClstm;
  Classifier m = build_classifier(s, 5);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < m.params.size(); ++p) {
    const Parameter& par = m.params[p];
    const bool bias = par.name.size() > 2 && par.name.substr(par.name.size() - 2) == ".b";
    if (!bias && par.name.rfind("fc", 0) == 0) continue;
    for (double v : par.value.data()) {
      if (bias) {
        EXPECT_EQ(v, 0.0);
        continue;
      }
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  EXPECT_LT(std::abs(mean), 0.01 * kInitStddev * 10);
  EXPECT_NEAR(sd, kInitStddev, 0.01 * kInitStddev);

  // Dense layers: fan-in scaled.
  for (const auto& [name, gain] : {std::pair{"fc1.w", 2.0}, std::pair{"fc2.w", 1.0}}) {
    const Tensor& w = m.params.get(name).value;
    const double fan_in = static_cast<double>(w.size() / w.shape().n);
    double s2 = 0.0;
    for (double v : w.data()) s2 += v * v;
    EXPECT_NEAR(std::sqrt(s2 / w.size()), std::sqrt(gain / fan_in), 0.1 * std::sqrt(gain / fan_in)) << name;
  }
}

TEST(Classifier, CnnHasNoRecurrentParameters) {
  Classifier cnn = build_classifier(small_classifier(ClassifierVariant::Cnn), 1);
  for (std::size_t p = 0; p < cnn.params.size(); ++p) EXPECT_FALSE(cnn.params[p].recurrent);
  for (auto v : {ClassifierVariant::Clstm, ClassifierVariant::TreeLstm, ClassifierVariant::TreeClstm}) {
    Classifier m = build_classifier(small_classifier(v), 1);
    std::size_t rec = 0;
    for (std::size_t p = 0; p < m.params.size(); ++p) rec += m.params[p].recurrent;
    EXPECT_EQ(rec, 8u) << to_string(v);
  }
}

TEST(Classifier, OutputsAreIndependentProbabilities) {
  TreeGraph tree = tree_moving_mnist_topology();
  std::mt19937_64 rng(6);
  auto frames = random_frames(rng, tree.node_count(), Shape::chw(1, 64, 64));
  for (auto v : {ClassifierVariant::Cnn, ClassifierVariant::Clstm, ClassifierVariant::TreeLstm,
                 ClassifierVariant::TreeClstm}) {
    Classifier m = build_classifier(small_classifier(v), 2);
    fill_random(m.params, rng, 0.3);
    auto out = run_classifier(m, tree, frames);
    ASSERT_EQ(out.size(), 15u);
    bool sums_to_one = true;
    for (const Tensor& t : out) {
      ASSERT_EQ(t.shape(), Shape::chw(10, 1, 1));
      for (double p : t.data()) {
        EXPECT_GT(p, 0.0);
        EXPECT_LT(p, 1.0);
      }
      sums_to_one = sums_to_one && std::abs(t.sum() - 1.0) < 1e-6;
    }
    EXPECT_FALSE(sums_to_one) << to_string(v);
  }
}

TEST(Classifier, CnnNodesAreIndependent) {
  TreeGraph tree = tree_moving_mnist_topology();
  std::mt19937_64 rng(7);
  auto frames = random_frames(rng, tree.node_count(), Shape::chw(1, 64, 64));
  Classifier m = build_classifier(small_classifier(ClassifierVariant::Cnn), 3);
  fill_random(m.params, rng, 0.3);
  auto base = run_classifier(m, tree, frames);
  frames[0] = random_tensor(rng, Shape::chw(1, 64, 64), 0.0, 1.0);
  auto moved = run_classifier(m, tree, frames);
  EXPECT_GT(max_abs_diff(base[0], moved[0]), 0.0);
  for (std::size_t j = 1; j < base.size(); ++j) EXPECT_EQ(max_abs_diff(base[j], moved[j]), 0.0);
}

TEST(Classifier, TreeVariantPropagatesLeafToRoot) {
  TreeGraph tree = tree_moving_mnist_topology();
  std::mt19937_64 rng(8);
  auto frames = random_frames(rng, tree.node_count(), Shape::chw(1, 64, 64));
  for (auto v : {ClassifierVariant::TreeClstm, ClassifierVariant::TreeLstm}) {
    Classifier m = build_classifier(small_classifier(v), 3);
    fill_random(m.params, rng, 0.3);
    auto base = run_classifier(m, tree, frames);
    auto changed = frames;
    changed[0] = random_tensor(rng, Shape::chw(1, 64, 64), 0.0, 1.0);
    auto moved = run_classifier(m, tree, changed);
    EXPECT_GT(max_abs_diff(base[tree.root()], moved[tree.root()]), 0.0) << to_string(v);
    // Node 3 sits on a different leaf chain.
    EXPECT_EQ(max_abs_diff(base[3], moved[3]), 0.0) << to_string(v);
  }
}

TEST(Classifier, RejectsWrongFrames) {
  TreeGraph tree = tree_moving_mnist_topology();
  Classifier m = build_classifier(small_classifier(ClassifierVariant::Cnn), 1);
  Tape tape;
  std::vector<Tensor> few(3, Tensor(Shape::chw(1, 64, 64)));
  EXPECT_THROW(classify_tree(tape, m, tree, few), ShapeError);
  std::vector<Tensor> bad(15, Tensor(Shape::chw(1, 32, 32)));
  EXPECT_THROW(classify_tree(tape, m, tree, bad), ShapeError);
}

TEST(SegNet, ZeroWeightsGiveHalfMaps) {
  TreeGraph tree = TreeGraph::chain(3);
  std::mt19937_64 rng(9);
  SegNet m = build_segnet(small_segnet(), 1);
  for (std::size_t p = 0; p < m.params.size(); ++p) m.params[p].value = Tensor(m.params[p].value.shape());
  auto out = run_segnet(m, tree, random_frames(rng, 3, Shape::chw(3, 41, 41)));
  for (const Tensor& t : out) {
    ASSERT_EQ(t.shape(), Shape::chw(1, 41, 41));
    for (double v : t.data()) EXPECT_EQ(v, 0.5);
  }
}

TEST(SegNet, OutputsInUnitInterval) {
  TreeGraph tree = tree_moving_mnist_topology();
  std::mt19937_64 rng(10);
  auto frames = random_frames(rng, tree.node_count(), Shape::chw(3, 41, 41));
  for (auto rec : {Recurrence::None, Recurrence::Sequential, Recurrence::Tree}) {
    for (bool att : {false, true}) {
      SegNetSpec s = small_segnet();
      s.recurrence = rec;
      s.attention = att;
      SegNet m = build_segnet(s, 2);
      fill_random(m.params, rng, 0.3);
      for (const Tensor& t : run_segnet(m, tree, frames)) {
        for (double v : t.data()) {
          EXPECT_GE(v, 0.0);
          EXPECT_LE(v, 1.0);
        }
      }
    }
  }
}

TEST(SegNet, RecurrentSitesDiffer) {
  TreeGraph tree = TreeGraph::chain(3);
  std::mt19937_64 rng(11);
  auto frames = random_frames(rng, 3, Shape::chw(3, 41, 41));
  std::vector<std::vector<Tensor>> outs;
  for (auto site : {RecurrentSite::Bottleneck, RecurrentSite::Conv3_2, RecurrentSite::Conv4_2}) {
    SegNetSpec s = small_segnet();
    s.site = site;
    SegNet m = build_segnet(s, 3);
    std::mt19937_64 wrng(12);
    fill_random(m.params, wrng, 0.3);
    EXPECT_NE(m.params.find("rnn.W_i"), nullptr);
    outs.push_back(run_segnet(m, tree, frames));
  }
  EXPECT_GT(max_abs_diff(outs[0][0], outs[2][0]), 1e-9);
  EXPECT_GT(max_abs_diff(outs[0][0], outs[1][0]), 1e-9);
}

TEST(SegNet, AttentionPlacement) {
  SegNetSpec s = small_segnet();
  SegNet m = build_segnet(s, 1);
  EXPECT_NE(m.params.find("att_rec.2.w"), nullptr);
  EXPECT_EQ(m.params.find("att_rec.3.w"), nullptr);
  EXPECT_NE(m.params.find("att_skip.3.w"), nullptr);
  s.site = RecurrentSite::Conv3_2;
  SegNet m2 = build_segnet(s, 1);
  EXPECT_EQ(m2.params.find("att_skip.0.w"), nullptr);
  s.attention = false;
  SegNet m3 = build_segnet(s, 1);
  EXPECT_EQ(m3.params.find("att_rec.0.w"), nullptr);
}

TEST(SegNet, SpecValidation) {
  SegNetSpec s;
  s.widths = {8};
  EXPECT_THROW(s.validate(), ConfigError);
  s.widths = {4, 8};
  s.site = RecurrentSite::Conv4_2;
  EXPECT_THROW(s.validate(), ConfigError);
  s = SegNetSpec{};
  s.padded_size = 50;
  EXPECT_THROW(s.validate(), ConfigError);
  s = SegNetSpec{};
  EXPECT_EQ(SegNetSpec::from_json(s.to_json()).to_json(), s.to_json());
}

TEST(SegNet, TreeLeafReachesRootOnly) {
  TreeGraph tree = tree_moving_mnist_topology();
  std::mt19937_64 rng(13);
  auto frames = random_frames(rng, tree.node_count(), Shape::chw(3, 41, 41));
  SegNet m = build_segnet(small_segnet(), 4);
  fill_random(m.params, rng, 0.3);
  auto base = run_segnet(m, tree, frames);
  frames[0] = random_tensor(rng, Shape::chw(3, 41, 41), 0.0, 1.0);
  auto moved = run_segnet(m, tree, frames);
  EXPECT_GT(max_abs_diff(base[tree.root()], moved[tree.root()]), 0.0);
  EXPECT_EQ(max_abs_diff(base[3], moved[3]), 0.0);
}

TEST(SegNet, TinyNetworkGradientsMatchFiniteDifferences) {
  SegNetSpec s;
  s.widths = {2, 3};
  s.frame_size = 7;
  s.padded_size = 8;
  s.recurrent_hidden = 2;
  s.recurrent_attention_depth = 2;
  s.skip_attention_depth = 2;
  s.site = RecurrentSite::Conv3_2;
  TreeGraph tree(2, {{}, {}, {0, 1}});
  std::mt19937_64 rng(14);
  auto frames = random_frames(rng, 3, Shape::chw(3, 7, 7));
  std::vector<Tensor> truth;
  for (int i = 0; i < 3; ++i) {
    Tensor t(Shape::chw(1, 7, 7));
    for (double& v : t.data()) v = rng() % 2;
    truth.push_back(t);
  }
  for (auto site : {RecurrentSite::Bottleneck, RecurrentSite::Conv3_2}) {
    s.site = site;
    SegNet m = build_segnet(s, 5);
    fill_random(m.params, rng, 0.5);
    auto loss = [&](Tape& tape, ParameterSet&) {
      auto out = seg_forward(tape, m, tree, frames);
      std::vector<Var> terms;
      for (std::size_t j = 0; j < out.size(); ++j) terms.push_back(bce(out[j], truth[j]));
      return add_n(terms);
    };
    GradCheckOptions opt;
    opt.threshold = 1e-4;
    GradCheckReport rep = check_gradients(m.params, loss, opt);
    EXPECT_TRUE(rep.passed()) << rep.max_rel_error();
  }
}
