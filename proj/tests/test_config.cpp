#include <cstdlib>

#include <gtest/gtest.h>

#include "pedseg/config.hpp"

using namespace pedseg;
using nlohmann::json;

namespace {

json minimal() {
  return {{"data", {{"region_mapping", {{"et", {1}}, {"tc", {1, 2}}, {"wt", {1, 2, 4}}}}}}};
}

void expect_invalid(const json& j, const std::vector<std::string>& overrides = {}) {
  try {
    (void)parse_pipeline_config(j, {}, overrides);
    ADD_FAILURE() << "accepted: " << j.dump();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidConfig) << e.what();
  }
}

}  // namespace

TEST(EnvInterpolation, VariablesAndDefaults) {
  ::setenv("PEDSEG_TEST_ROOT", "/data/x", 1);
  ::unsetenv("PEDSEG_TEST_UNSET");
  EXPECT_EQ(interpolate_env("${PEDSEG_TEST_ROOT}/m.json"), "/data/x/m.json");
  EXPECT_EQ(interpolate_env("${PEDSEG_TEST_UNSET:-fallback}"), "fallback");
  EXPECT_EQ(interpolate_env("${PEDSEG_TEST_ROOT:-fallback}"), "/data/x");
  EXPECT_EQ(interpolate_env("plain"), "plain");
  EXPECT_THROW(interpolate_env("${PEDSEG_TEST_UNSET}"), Error);
  EXPECT_THROW(interpolate_env("${PEDSEG_TEST_ROOT"), Error);

  auto j = minimal();
  j["output"] = "${PEDSEG_TEST_ROOT}/runs";
  EXPECT_EQ(parse_pipeline_config(j).output_dir, std::filesystem::path("/data/x/runs"));
}

TEST(Overrides, DottedPathsAndTypedValues) {
  json j = minimal();
  apply_override(j, "train.max_steps=5");
  apply_override(j, "model.activation=gelu");
  apply_override(j, "train.patch=[8,8,16]");
  EXPECT_EQ(j["train"]["max_steps"], 5);
  EXPECT_EQ(j["model"]["activation"], "gelu");
  const auto c = parse_pipeline_config(j);
  EXPECT_EQ(c.train.max_steps, 5u);
  EXPECT_EQ(c.train.spec.activation, nn::Activation::GELU);
  EXPECT_EQ(c.train.patch, (Shape3{8, 8, 16}));
  EXPECT_EQ(c.inference.patch, c.train.patch);
  EXPECT_THROW(apply_override(j, "novalue"), Error);
  EXPECT_EQ(parse_pipeline_config(minimal(), {}, {"seed=9"}).train.seed, 9u);
}

TEST(PipelineConfig, DefaultsAndResolution) {
  auto j = minimal();
  j["data"]["manifest"] = "cases/manifest.json";
  j["model"] = {{"variant", "onet3d_singleconv_k5"}, {"base_channels", 8}, {"depth", 3}};
  j["train"] = {{"patch", 32}, {"optimizer", {{"learning_rate", 3e-3}}}};
  j["ensemble"] = {{"groups", {"a.ckpt", "b.ckpt", "c.ckpt"}}};
  j["postprocess"] = {{"min_component_size", {10, 20, 30}}};
  const auto c = parse_pipeline_config(j, "/cfg");
  EXPECT_EQ(*c.manifest, std::filesystem::path("/cfg/cases/manifest.json"));
  EXPECT_EQ(c.train.spec.family, nn::Family::ONet3D);
  EXPECT_EQ(c.train.spec.kernel_size, 5);
  EXPECT_EQ(c.train.spec.base_channels, 8);
  EXPECT_DOUBLE_EQ(c.train.optimizer.learning_rate, 3e-3);
  ASSERT_TRUE(c.ensemble.has_value());
  EXPECT_EQ(c.ensemble->groups.size(), 3u);
  EXPECT_EQ(c.ensemble->groups[2][0], std::filesystem::path("/cfg/c.ckpt"));
  EXPECT_DOUBLE_EQ(c.postprocess.min_component_size[2], 30.0);
  EXPECT_EQ(c.region_mapping.wt_labels, (std::set<std::int32_t>{1, 2, 4}));
  EXPECT_EQ(c.metrics.connectivity, morph::Connectivity::TwentySix);
}

TEST(PipelineConfig, RegionMappingIsRequired) {
  expect_invalid({{"data", json::object()}});
  expect_invalid(json::object());
  auto bad = minimal();
  bad["data"]["region_mapping"]["et"] = {1, 3};  // not inside tc
  expect_invalid(bad);
}

TEST(PipelineConfig, UnknownKeysAndBadValuesRejected) {
  auto j = minimal();
  j["trainer"] = json::object();
  expect_invalid(j);
  expect_invalid(minimal(), {"train.learning_rate=0.1"});
  expect_invalid(minimal(), {"model.variant=vnet"});
  expect_invalid(minimal(), {"model.activation=tanh"});
  expect_invalid(minimal(), {"train.patch=[8,8,7]"});
  expect_invalid(minimal(), {"train.batch_size=\"two\""});
  expect_invalid(minimal(), {"loss.family=focal"});
  expect_invalid(minimal(), {"inference.overlap=1.5"});
  expect_invalid(minimal(), {"ensemble.groups=[]"});
  expect_invalid(minimal(), {"metrics.connectivity=5"});
}
