#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "treeclstm/config.hpp"
#include "treeclstm/errors.hpp"

using namespace treeclstm;

TEST(Config, DefaultsRoundTrip) {
  ExperimentConfig c;
  const ExperimentConfig d = ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(c.to_json(), d.to_json());
}

TEST(Config, PartialSectionsKeepDefaults) {
  const ExperimentConfig c = ExperimentConfig::from_json({{"train", {{"epochs", 3}}}, {"classifier", {{"input_pool", 1}}}});
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.train.lr, TrainConfig{}.lr);
  EXPECT_EQ(c.classifier_spec().input_pool, 1u);
  EXPECT_EQ(c.classifier_spec().conv1_channels, ClassifierSpec{}.conv1_channels);
}

TEST(Config, UnknownKeysAreRejectedWithPath) {
  try {
    ExperimentConfig::from_json({{"segnet", {{"widths", {4, 8}}, {"depth", 2}}}}, "x.json");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("x.json.segnet.depth"), std::string::npos) << e.what();
  }
  EXPECT_THROW(ExperimentConfig::from_json({{"optimizer", "sgd"}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"train", {{"lr", "fast"}}}}), ConfigError);
}

TEST(Config, ModelOverridesSpec) {
  ExperimentConfig c;
  c.task = Task::Seg;
  c.model = "cnn";
  c.segnet.recurrence = Recurrence::Tree;
  c.segnet.attention = true;
  EXPECT_EQ(c.segnet_spec().recurrence, Recurrence::None);
  EXPECT_FALSE(c.segnet_spec().attention);
  c.model = "att-treeclstm";
  EXPECT_TRUE(c.segnet_spec().attention);
  EXPECT_EQ(c.segnet_spec().recurrence, Recurrence::Tree);
  c.model = "clstm";
  EXPECT_EQ(c.segnet_spec().recurrence, Recurrence::Sequential);
}

TEST(Config, TaskModelPairs) {
  for (const auto& m : kClassifierModels) EXPECT_NO_THROW(desk_config(Task::Cls, m));
  for (const auto& m : kSegmenterModels) EXPECT_NO_THROW(desk_config(Task::Seg, m));
  EXPECT_THROW(desk_config(Task::Cls, "att-treeclstm"), ConfigError);
  EXPECT_THROW(desk_config(Task::Seg, "treelstm"), ConfigError);
  EXPECT_THROW(task_from_string("det"), ConfigError);
}

TEST(Config, ShippedConfigsMatchDeskPresets) {
  const std::filesystem::path dir = std::filesystem::path(TREECLSTM_TEST_DATA) / ".." / ".." / "configs";
  const ExperimentConfig cls = ExperimentConfig::load(dir / "desk_cls.json");
  EXPECT_EQ(cls.to_json(), desk_config(Task::Cls, cls.model).to_json());
  const ExperimentConfig seg = ExperimentConfig::load(dir / "desk_seg.json");
  EXPECT_EQ(seg.to_json(), desk_config(Task::Seg, seg.model).to_json());
}

TEST(Config, LoadErrors) {
  EXPECT_THROW(ExperimentConfig::load("/nonexistent/c.json"), IoError);
  const auto p = std::filesystem::temp_directory_path() / "treeclstm_bad_config.json";
  std::ofstream(p) << "{not json";
  EXPECT_THROW(ExperimentConfig::load(p), ParseError);
  std::filesystem::remove(p);
}

TEST(Config, HashIsStable) {
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
  EXPECT_EQ(fnv1a_hex("abc").size(), 16u);
}
