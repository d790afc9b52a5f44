#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pedseg/postprocess.hpp"
#include "test_util.hpp"

using namespace pedseg;
using testutil::fill_box;

TEST(SizeFilter, Examples) {
  const Shape3 s{8, 8, 8};
  Mask island(s, 0);
  island(3, 3, 3) = 1;
  EXPECT_EQ(count_on(post::size_filter(island, 10, morph::Connectivity::TwentySix)), 0u);
  std::mt19937_64 rng(1);
  const Mask m = testutil::random_mask(rng, s, 0.3);
  EXPECT_EQ(post::size_filter(m, 0, morph::Connectivity::TwentySix), m);
}

TEST(SizeFilter, MatchesFloodFillOracle) {
  std::mt19937_64 rng(4);
  const std::array<std::pair<morph::Connectivity, int>, 3> conns{
      {{morph::Connectivity::Six, 6}, {morph::Connectivity::Eighteen, 18}, {morph::Connectivity::TwentySix, 26}}};
  for (int t = 0; t < 90; ++t) {
    const Mask m = testutil::random_mask(rng, {8, 8, 8}, 0.1 + 0.01 * (t % 30));
    const auto [conn, c] = conns[t % 3];
    const int k = 1 + t % 12;
    const Mask got = post::size_filter(m, k, conn);
    EXPECT_EQ(got, testutil::to_mask(oracle::size_filter(testutil::to_vol(m), k, c)));
    for (std::size_t i = 0; i < m.size(); ++i) EXPECT_LE(got[i], m[i]);
  }
}

TEST(EnforceHierarchy, ClosureExamples) {
  const Shape3 s{3, 3, 3};
  RegionMaskSet raw(s);
  raw.et(1, 1, 1) = 1;
  const auto out = post::enforce_hierarchy(raw);
  EXPECT_TRUE(out.tc(1, 1, 1) && out.wt(1, 1, 1));
  EXPECT_TRUE(out.is_nested());
  EXPECT_TRUE(post::enforce_hierarchy(out).same_masks(out));
}

TEST(EnforceHierarchy, MatchesSetUnionOracle) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 100; ++t) {
    const auto raw = testutil::random_regions(rng, {6, 6, 6}, 0.3);
    const auto out = post::enforce_hierarchy(raw);
    for (std::size_t i = 0; i < raw.wt.size(); ++i) {
      EXPECT_EQ(out.et[i], raw.et[i]);
      EXPECT_EQ(out.tc[i], raw.tc[i] | raw.et[i]);
      EXPECT_EQ(out.wt[i], raw.wt[i] | raw.tc[i] | raw.et[i]);
    }
  }
}

TEST(SmoothBoundaries, Examples) {
  const Shape3 s{16, 16, 16};
  Mask cube(s, 0);
  fill_box(cube, {5, 5, 5}, {10, 10, 10});
  EXPECT_EQ(post::smooth_boundaries(cube, 1), cube);
  EXPECT_EQ(count_on(post::smooth_boundaries(Mask(s, 0), 1)), 0u);

  Mask notched = cube;
  notched(7, 5, 7) = 0;  // face voxel removed
  EXPECT_EQ(post::smooth_boundaries(notched, 1), cube);
}

TEST(SmoothBoundaries, MatchesCubeElementOracleAndIsIdempotent) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 30; ++t) {
    const Mask m = testutil::random_mask(rng, {7, 7, 7}, 0.5);
    const auto v = testutil::to_vol(m);
    // Closing evaluated on a padded grid, so the border does not erode it.
    oracle::Vol padded(v.nx + 2, v.ny + 2, v.nz + 2, 0);
    for (int z = 0; z < v.nz; ++z)
      for (int y = 0; y < v.ny; ++y)
        for (int x = 0; x < v.nx; ++x) padded.at(x + 1, y + 1, z + 1) = v.at(x, y, z);
    const auto closed_p = oracle::erode(oracle::dilate(padded, 1), 1);
    oracle::Vol closed(v.nx, v.ny, v.nz, 0);
    for (int z = 0; z < v.nz; ++z)
      for (int y = 0; y < v.ny; ++y)
        for (int x = 0; x < v.nx; ++x) closed.at(x, y, z) = closed_p.at(x + 1, y + 1, z + 1);
    const auto expected = oracle::dilate(oracle::erode(closed, 1), 1);
    const Mask got = post::smooth_boundaries(m, 1);
    EXPECT_EQ(got, testutil::to_mask(expected));
    EXPECT_EQ(post::smooth_boundaries(got, 1), got);
  }
}

TEST(PostprocessCase, CleanInputUnchanged) {
  const Shape3 s{20, 20, 20};
  RegionMaskSet rm(s);
  fill_box(rm.wt, {3, 3, 3}, {15, 15, 15});
  fill_box(rm.tc, {5, 5, 5}, {12, 12, 12});
  fill_box(rm.et, {6, 6, 6}, {10, 10, 10});
  EXPECT_TRUE(post::postprocess_case(rm, {}).same_masks(rm));
}

TEST(PostprocessCase, SpecklesRemovedBlobKept) {
  const Shape3 s{20, 20, 20};
  RegionMaskSet rm(s);
  fill_box(rm.wt, {4, 4, 4}, {12, 12, 12});
  rm.tc = rm.wt;
  rm.et = rm.wt;
  RegionMaskSet noisy = rm;
  for (auto [x, y, z] : std::vector<std::array<int, 3>>{{17, 17, 17}, {1, 18, 2}, {18, 1, 9}})
    for (int r = 0; r < kRegions; ++r) noisy.region(r)(x, y, z) = 1;
  EXPECT_TRUE(post::postprocess_case(noisy, {}).same_masks(rm));
}

TEST(PostprocessCase, NestedIdempotentOnRandomTriples) {
  std::mt19937_64 rng(12);
  post::PostprocConfig cfg;
  cfg.min_component_size = {4, 4, 4};
  for (int t = 0; t < 300; ++t) {
    const auto raw = testutil::random_regions(rng, testutil::random_shape(rng, 3, 9), 0.15 + 0.002 * t);
    const auto once = post::postprocess_case(raw, cfg);
    EXPECT_TRUE(once.is_nested());
    EXPECT_TRUE(post::postprocess_case(once, cfg).same_masks(once));
  }
}

TEST(PostprocessCase, DefaultConfigIdempotent) {
  std::mt19937_64 rng(14);
  for (int t = 0; t < 20; ++t) {
    const auto raw = testutil::random_regions(rng, {16, 16, 16}, 0.45);
    const auto once = post::postprocess_case(raw, {});
    EXPECT_TRUE(once.is_nested());
    EXPECT_TRUE(post::postprocess_case(once, {}).same_masks(once));
  }
}

TEST(PostprocConfig, Validation) {
  EXPECT_THROW(post::postproc_config_from_json({{"radius", 0}}), Error);
  EXPECT_THROW(post::postproc_config_from_json({{"min_size", 3}}), Error);
  EXPECT_THROW(post::postproc_config_from_json({{"connectivity", 8}}), Error);
  const auto c = post::postproc_config_from_json({{"min_component_size", 2.0}, {"size_in_mm3", true}});
  EXPECT_EQ(c.min_voxels(0, {0.5, 0.5, 1.0}), 8u);
}
