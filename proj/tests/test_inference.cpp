#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pedseg/inference.hpp"
#include "pedseg/nn/checkpoint.hpp"
#include "test_util.hpp"

using namespace pedseg;

namespace {

// Emits the same value everywhere.
struct ConstantStub {
  float value = 0.0f;
  nn::Tensor forward(const nn::Tensor& x) const { return nn::Tensor(kRegions, x.shape(), value); }
};

// Copies input channel 0 into every output channel.
struct EchoStub {
  nn::Tensor forward(const nn::Tensor& x) const {
    nn::Tensor out(kRegions, x.shape());
    for (int c = 0; c < kRegions; ++c) std::copy(x.channel(0).begin(), x.channel(0).end(), out.channel(c).begin());
    return out;
  }
};

MultiModalVolume coordinate_volume(Shape3 s) {
  MultiModalVolume v;
  v.data = MultiGrid<float>(kModalities, s, 0.0f);
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) v.data.at(0, x, y, z) = static_cast<float>(x + 10 * y + 100 * z) / 1000.0f;
  v.case_id = "coords";
  return v;
}

LogitsVolume logits_of(Shape3 s, std::vector<float> values, std::string case_id = "c") {
  LogitsVolume l;
  l.data = nn::Tensor(kRegions, s);
  l.data.storage() = std::move(values);
  l.case_id = std::move(case_id);
  return l;
}

RegionMaskSet random_set(std::mt19937_64& rng, Shape3 s) { return testutil::random_regions(rng, s, 0.5); }

}  // namespace

TEST(WindowStarts, CoverTheAxis) {
  EXPECT_EQ(detail::window_starts(10, 16, 0.5), std::vector<int>{0});
  EXPECT_EQ(detail::window_starts(16, 16, 0.5), std::vector<int>{0});
  for (int dim = 17; dim < 80; ++dim)
    for (int patch : {8, 16}) {
      if (dim < patch) continue;
      const auto s = detail::window_starts(dim, patch, 0.5);
      EXPECT_EQ(s.front(), 0);
      EXPECT_EQ(s.back(), dim - patch);
      for (std::size_t i = 1; i < s.size(); ++i) EXPECT_LE(s[i] - s[i - 1], patch / 2 + 1);
    }
}

TEST(ImportanceMap, PositiveAndPeakedAtCentre) {
  const auto w = detail::importance_map({9, 9, 9}, 0.125, true);
  EXPECT_FLOAT_EQ(w(4, 4, 4), 1.0f);
  for (float v : w) EXPECT_GT(v, 0.0f);
  EXPECT_LT(w(0, 0, 0), w(1, 1, 1));
  EXPECT_FLOAT_EQ(w(0, 4, 4), w(8, 4, 4));
}

TEST(PredictLogits, OutputMatchesInputShapeEvenWhenSmallerThanPatch) {
  SlidingWindowConfig cfg;
  cfg.patch = {16, 16, 16};
  for (Shape3 s : {Shape3{5, 7, 9}, Shape3{16, 16, 16}, Shape3{20, 17, 33}}) {
    const auto lv = predict_logits(ConstantStub{2.5f}, coordinate_volume(s), cfg, 4);
    EXPECT_EQ(lv.shape(), s);
    EXPECT_EQ(lv.data.channels(), kRegions);
    for (float v : lv.data.storage()) EXPECT_NEAR(v, 2.5f, 1e-5f);
    EXPECT_EQ(lv.case_id, "coords");
  }
}

TEST(PredictLogits, StitchingIsTranslationCorrect) {
  SlidingWindowConfig cfg;
  cfg.patch = {8, 8, 8};
  for (bool gaussian : {true, false}) {
    cfg.gaussian = gaussian;
    const Shape3 s{19, 13, 22};
    const auto vol = coordinate_volume(s);
    const auto lv = predict_logits(EchoStub{}, vol, cfg);
    for (int c = 0; c < kRegions; ++c)
      for (int z = 0; z < s.nz; ++z)
        for (int y = 0; y < s.ny; ++y)
          for (int x = 0; x < s.nx; ++x) ASSERT_NEAR(lv.data.at(c, x, y, z), vol.data.at(0, x, y, z), 1e-5f);
  }
}

TEST(PredictLogits, RealModelPredictsDeterministically) {
  nn::ArchitectureSpec spec;
  spec.base_channels = 2;
  spec.depth = 2;
  const nn::Model model(spec, 3);
  SlidingWindowConfig cfg;
  cfg.patch = {8, 8, 8};
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n;
  MultiModalVolume vol;
  vol.data = MultiGrid<float>(kModalities, {11, 9, 10});
  for (float& v : vol.data.storage()) v = n(rng);
  const auto a = predict_logits(model, vol, cfg, spec.divisor());
  const auto b = predict_logits(model, vol, cfg, spec.divisor());
  EXPECT_EQ(a.data, b.data);
  EXPECT_EQ(a.shape(), vol.shape());
}

TEST(PredictLogits, OversizedPatchRaisesOOMShape) {
  SlidingWindowConfig cfg;
  cfg.patch = {16, 16, 16};
  cfg.max_patch_voxels = 1000;
  try {
    (void)predict_logits(ConstantStub{}, coordinate_volume({16, 16, 16}), cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::OOMShape);
  }
}

TEST(FuseGroup, SumsLogitsBeforeThresholding) {
  const Shape3 s{1, 1, 1};
  const std::vector<LogitsVolume> g{logits_of(s, {2.0f, -3.0f, 0.5f}), logits_of(s, {-1.0f, 1.0f, -0.5f})};
  const auto m = fuse_group(g, 0.0);
  EXPECT_EQ(m.et[0], 1);  // 2 - 1 > 0
  EXPECT_EQ(m.tc[0], 0);
  EXPECT_EQ(m.wt[0], 0);  // sum exactly 0 is off
  EXPECT_EQ(fuse_group(g, -0.5).wt[0], 1);
}

TEST(FuseGroup, Errors) {
  const Shape3 s{1, 1, 1};
  try {
    (void)fuse_group(std::span<const LogitsVolume>{}, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyGroup);
  }
  const std::vector<LogitsVolume> shapes{logits_of(s, {0, 0, 0}), logits_of({2, 1, 1}, {0, 0, 0, 0, 0, 0})};
  try {
    (void)fuse_group(shapes, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
  const std::vector<LogitsVolume> cases{logits_of(s, {0, 0, 0}, "a"), logits_of(s, {0, 0, 0}, "b")};
  try {
    (void)fuse_group(cases, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CaseMismatch);
  }
}

TEST(MajorityVote, MatchesExhaustiveCount) {
  std::mt19937_64 rng(17);
  const Shape3 s{4, 3, 2};
  for (int t = 0; t < 500; ++t) {
    const int n = 1 + t % 5;
    std::vector<RegionMaskSet> sets;
    for (int i = 0; i < n; ++i) sets.push_back(random_set(rng, s));
    const TieBreak tie = t % 2 ? TieBreak::Positive : TieBreak::Negative;
    const auto out = majority_vote(sets, tie);
    for (int c = 0; c < kRegions; ++c)
      for (std::size_t i = 0; i < s.voxels(); ++i) {
        std::vector<int> ballots;
        for (const auto& m : sets) ballots.push_back(m.region(c)[i]);
        ASSERT_EQ(out.region(c)[i], oracle::vote(ballots, tie == TieBreak::Positive));
      }
  }
}

TEST(MajorityVote, PermutationInvariantAndMonotone) {
  std::mt19937_64 rng(19);
  const Shape3 s{5, 5, 5};
  for (int t = 0; t < 100; ++t) {
    std::vector<RegionMaskSet> sets;
    for (int i = 0; i < 5; ++i) sets.push_back(random_set(rng, s));
    const auto base = majority_vote(sets);
    auto shuffled = sets;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    EXPECT_TRUE(majority_vote(shuffled).same_masks(base));

    // Switching extra voxels on in one member never switches output off.
    auto grown = sets;
    const auto extra = random_set(rng, s);
    for (int c = 0; c < kRegions; ++c)
      for (std::size_t i = 0; i < s.voxels(); ++i) grown[t % 5].region(c)[i] |= extra.region(c)[i];
    const auto more = majority_vote(grown);
    for (int c = 0; c < kRegions; ++c)
      for (std::size_t i = 0; i < s.voxels(); ++i) EXPECT_GE(more.region(c)[i], base.region(c)[i]);
  }
}

TEST(MajorityVote, UnanimityAndIdenticalGroups) {
  std::mt19937_64 rng(23);
  const auto a = random_set(rng, {6, 6, 6});
  const std::vector<RegionMaskSet> same{a, a, a};
  EXPECT_TRUE(majority_vote(same).same_masks(a));
  EXPECT_TRUE(majority_vote(same, TieBreak::Negative).same_masks(a));
}

TEST(MajorityVote, TwoMemberTieFollowsTieBreak) {
  RegionMaskSet a({2, 2, 2}), b({2, 2, 2});
  a.et[0] = 1;  // 1 of 2 votes
  a.tc[1] = b.tc[1] = 1;
  const std::vector<RegionMaskSet> g{a, b};
  EXPECT_EQ(majority_vote(g, TieBreak::Positive).et[0], 1);
  EXPECT_EQ(majority_vote(g, TieBreak::Negative).et[0], 0);
  EXPECT_EQ(majority_vote(g, TieBreak::Negative).tc[1], 1);
  EXPECT_EQ(count_on(majority_vote(g).wt), 0u);
}

TEST(Ensemble, SingletonEqualsThresholdedModel) {
  std::mt19937_64 rng(29);
  std::normal_distribution<float> n;
  const Shape3 s{6, 5, 4};
  std::vector<float> v(kRegions * s.voxels());
  for (float& x : v) x = n(rng);
  const auto l = logits_of(s, v);
  const auto ens = ensemble_from_logits({{l}}, 0.0, TieBreak::Positive);
  for (int c = 0; c < kRegions; ++c)
    for (std::size_t i = 0; i < s.voxels(); ++i) EXPECT_EQ(ens.region(c)[i], l.data.channel(c)[i] > 0.0f ? 1 : 0);
}

TEST(Ensemble, HandTraceOnTwoCubedGrid) {
  // Three groups over a 2x2x2 grid; group 0 has two members whose logits
  // cancel at voxel 0 and agree elsewhere.
  const Shape3 s{2, 2, 2};
  auto fill = [&](float et0, float rest) {
    std::vector<float> v(kRegions * 8, rest);
    v[0] = et0;
    return logits_of(s, v);
  };
  const std::vector<std::vector<LogitsVolume>> groups{
      {fill(3.0f, 1.0f), fill(-3.0f, 1.0f)},  // et voxel 0: sum 0, off
      {fill(1.0f, -1.0f)},                    // et voxel 0 on, rest off
      {fill(-1.0f, 2.0f)},                    // et voxel 0 off, rest on
  };
  const auto out = ensemble_from_logits(groups, 0.0, TieBreak::Positive);
  EXPECT_EQ(out.et[0], 0);  // votes: off, on, off
  for (int c = 0; c < kRegions; ++c)
    for (int i = c == 0 ? 1 : 0; i < 8; ++i) EXPECT_EQ(out.region(c)[i], 1);  // on, off, on
}

TEST(Ensemble, InMemoryPredictorsShareOneForwardPass) {
  const ConstantStub pos{1.0f}, neg{-1.0f};
  SlidingWindowConfig cfg;
  cfg.patch = {4, 4, 4};
  const auto vol = coordinate_volume({4, 4, 4});
  const std::vector<std::vector<const ConstantStub*>> a{{&pos}, {&pos}, {&neg}};
  EXPECT_EQ(count_on(ensemble_predict(a, vol, cfg).wt), 64u);
  const std::vector<std::vector<const ConstantStub*>> b{{&pos, &neg, &neg}, {&neg}, {&pos}};
  EXPECT_EQ(count_on(ensemble_predict(b, vol, cfg).wt), 0u);
}

TEST(EnsembleConfig, ParsingAndThresholds) {
  const auto c = ensemble_config_from_json(
      {{"groups", {{"a.ckpt", "b.ckpt"}, "c.ckpt"}}, {"threshold", 0.5}, {"threshold_space", "probability"}},
      "/models");
  ASSERT_EQ(c.groups.size(), 2u);
  EXPECT_EQ(c.groups[0][1], std::filesystem::path("/models/b.ckpt"));
  EXPECT_EQ(c.groups[1][0], std::filesystem::path("/models/c.ckpt"));
  EXPECT_DOUBLE_EQ(c.logit_threshold(), 0.0);
  EXPECT_THROW(ensemble_config_from_json({{"groups", nlohmann::json::array({nlohmann::json::array()})}}), Error);
  EXPECT_THROW(ensemble_config_from_json({{"groups", {"a"}}, {"weights", 1}}), Error);
  EXPECT_THROW(ensemble_config_from_json({{"groups", {"a"}}, {"tie_break", "coin"}}), Error);
  const auto d = EnsembleConfig::one_model_per_group({"x", "y", "z"});
  EXPECT_EQ(d.groups.size(), 3u);
}

TEST(EnsembleConfig, CheckpointsOnDisk) {
  const auto dir = testutil::scratch_dir("ensemble_ckpt");
  nn::ArchitectureSpec spec;
  spec.base_channels = 2;
  spec.depth = 2;
  std::vector<std::filesystem::path> paths;
  for (int i = 0; i < 3; ++i) {
    nn::Checkpoint ck;
    ck.model = nn::Model(spec, 100 + i);
    ck.optimizer = nn::Optimizer({}, ck.model);
    ck.step = 1;
    paths.push_back(dir / ("m" + std::to_string(i) + ".ckpt"));
    nn::save_checkpoint(ck, paths.back());
  }
  SlidingWindowConfig cfg;
  cfg.patch = {8, 8, 8};
  MultiModalVolume vol = coordinate_volume({8, 8, 8});
  const auto out = ensemble_predict(EnsembleConfig::one_model_per_group(paths), vol, cfg);

  std::vector<RegionMaskSet> single;
  for (const auto& p : paths) {
    const auto h = load_model(p);
    const std::vector<LogitsVolume> one{predict_logits(h, vol, cfg)};
    single.push_back(fuse_group(one));
  }
  EXPECT_TRUE(out.same_masks(majority_vote(single)));
}
