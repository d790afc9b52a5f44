#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "pedseg/augmentation.hpp"
#include "pedseg/phantom.hpp"

using namespace pedseg;
using namespace pedseg::aug;

namespace {

Phantom small_phantom(std::uint64_t seed = 1) { return make_phantom(seed, {{12, 10, 14}}, "p"); }

AugmentationPolicy single(TransformParams p, double prob = 1.0, std::uint64_t seed = 0) {
  AugmentationPolicy policy;
  policy.singles.push_back({p, prob});
  policy.seed = seed;
  return policy;
}

TransformParams of(TransformKind k) {
  TransformParams p;
  p.kind = k;
  return p;
}

std::set<std::int32_t> labels_present(const LabelMap& l) { return {l.data.begin(), l.data.end()}; }

}  // namespace

TEST(Augment, EmptyPolicyIsIdentity) {
  const auto p = small_phantom();
  AugmentationPolicy policy;
  auto rng = rng_for_case(0, 0);
  const auto t = sample_transform(policy, rng);
  EXPECT_TRUE(t.is_identity());
  const auto [v, l] = apply_transform(t, p.volume, p.labels);
  EXPECT_EQ(v.data, p.volume.data);
  EXPECT_EQ(l.data, p.labels.data);
}

TEST(Augment, ZeroProbabilityNeverApplies) {
  const auto policy = single(of(TransformKind::Noise), 0.0);
  for (std::uint64_t i = 0; i < 50; ++i) {
    auto rng = rng_for_case(3, i);
    EXPECT_TRUE(sample_transform(policy, rng).is_identity());
  }
}

TEST(Augment, SeededAndPerCase) {
  const auto p = small_phantom();
  auto policy = single(of(TransformKind::Affine), 1.0, 42);
  const std::vector<AugmentCase> batch{{p.volume, p.labels}, {p.volume, p.labels}};
  const auto a = augment_batch(policy, batch), b = augment_batch(policy, batch);
  EXPECT_EQ(a[0].volume.data, b[0].volume.data);
  EXPECT_EQ(a[1].labels.data, b[1].labels.data);
  EXPECT_NE(a[0].volume.data, a[1].volume.data);
  policy.seed = 43;
  EXPECT_NE(augment_batch(policy, batch)[0].volume.data, a[0].volume.data);
}

TEST(Flip, AxisFrequencyMatchesProbability) {
  auto params = of(TransformKind::Flip);
  params.flip_probability = {0.5, 0.2, 0.9};
  const auto policy = single(params);
  std::array<int, 3> hits{};
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    auto rng = rng_for_case(7, i);
    const auto t = sample_transform(policy, rng);
    ASSERT_EQ(t.steps.size(), 1u);
    for (int a = 0; a < 3; ++a) hits[a] += t.steps[0].flip[a];
  }
  for (int a = 0; a < 3; ++a) EXPECT_NEAR(static_cast<double>(hits[a]) / n, params.flip_probability[a], 0.03);
}

TEST(Flip, IsAnInvolutionAndMovesLabelsWithImage) {
  const auto p = small_phantom();
  ConcreteTransform t;
  ConcreteStep st;
  st.kind = TransformKind::Flip;
  st.flip = {true, false, true};
  t.steps.push_back(st);
  const auto [v1, l1] = apply_transform(t, p.volume, p.labels);
  const Shape3 s = p.volume.shape();
  EXPECT_EQ(v1.data.at(2, 0, 3, 0), p.volume.data.at(2, s.nx - 1, 3, s.nz - 1));
  EXPECT_EQ(l1.data(1, 2, 3), p.labels.data(s.nx - 2, 2, s.nz - 4));
  const auto [v2, l2] = apply_transform(t, v1, l1);
  EXPECT_EQ(v2.data, p.volume.data);
  EXPECT_EQ(l2.data, p.labels.data);
}

TEST(Affine, IdentityParametersLeaveVolumeUnchanged) {
  const auto p = small_phantom();
  auto params = of(TransformKind::Affine);
  params.rotation_degrees = {0, 0};
  params.scale = {1, 1};
  auto rng = rng_for_case(1, 0);
  const auto t = sample_transform(single(params), rng);
  const auto [v, l] = apply_transform(t, p.volume, p.labels);
  EXPECT_EQ(l.data, p.labels.data);
  for (std::size_t i = 0; i < v.data.size(); ++i) ASSERT_NEAR(v.data.storage()[i], p.volume.data.storage()[i], 1e-5f);
}

TEST(Affine, LabelsStayInVocabulary) {
  const auto p = make_phantom(2, {{16, 16, 16}});
  auto params = of(TransformKind::Affine);
  params.rotation_degrees = {-30, 30};
  params.translation_mm = {-2, 2};
  for (std::uint64_t i = 0; i < 10; ++i) {
    auto rng = rng_for_case(5, i);
    const auto [v, l] = apply_transform(sample_transform(single(params), rng), p.volume, p.labels);
    for (auto lab : labels_present(l)) EXPECT_TRUE(p.labels.label_vocabulary.contains(lab)) << lab;
    EXPECT_NO_THROW(l.validate());
  }
}

TEST(Elastic, ZeroDisplacementIsIdentityAndLabelsStayValid) {
  const auto p = small_phantom();
  auto params = of(TransformKind::ElasticDeformation);
  params.elastic_max_displacement_mm = 0.0;
  auto rng = rng_for_case(1, 0);
  const auto [v, l] = apply_transform(sample_transform(single(params), rng), p.volume, p.labels);
  EXPECT_EQ(l.data, p.labels.data);
  for (std::size_t i = 0; i < v.data.size(); ++i) ASSERT_NEAR(v.data.storage()[i], p.volume.data.storage()[i], 1e-5f);

  params.elastic_max_displacement_mm = 3.0;
  auto rng2 = rng_for_case(2, 0);
  const auto [v2, l2] = apply_transform(sample_transform(single(params), rng2), p.volume, p.labels);
  EXPECT_NE(v2.data, p.volume.data);
  for (auto lab : labels_present(l2)) EXPECT_TRUE(p.labels.label_vocabulary.contains(lab));
}

TEST(IntensityTransforms, LeaveLabelsUnchanged) {
  const auto p = small_phantom();
  for (auto k : {TransformKind::Noise, TransformKind::RescaleIntensity, TransformKind::RandomBiasField}) {
    auto params = of(k);
    params.noise_std = {0.05, 0.1};
    auto rng = rng_for_case(9, 0);
    const auto [v, l] = apply_transform(sample_transform(single(params), rng), p.volume, p.labels);
    EXPECT_EQ(l.data, p.labels.data) << kTransformNames[static_cast<int>(k)];
    EXPECT_NE(v.data, p.volume.data) << kTransformNames[static_cast<int>(k)];
  }
}

TEST(IntensityTransforms, RescaleHitsTargetRange) {
  const auto p = small_phantom();
  auto params = of(TransformKind::RescaleIntensity);
  params.intensity_out = {-1.0, 2.0};
  auto rng = rng_for_case(0, 0);
  const auto [v, l] = apply_transform(sample_transform(single(params), rng), p.volume, p.labels);
  for (int c = 0; c < kModalities; ++c) {
    const auto ch = v.data.channel(c);
    const auto [mn, mx] = std::minmax_element(ch.begin(), ch.end());
    EXPECT_FLOAT_EQ(*mn, -1.0f);
    EXPECT_FLOAT_EQ(*mx, 2.0f);
  }
}

TEST(IntensityTransforms, BiasFieldIsPositiveAndOneWhenFlat) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10; ++i) {
    const auto st = sample_step(of(TransformKind::RandomBiasField), rng);
    EXPECT_EQ(st.bias_coefficients.size(), 20u);  // monomials of degree <= 3
    for (float f : bias_field(st, {6, 7, 8})) EXPECT_GT(f, 0.0f);
  }
  auto flat = of(TransformKind::RandomBiasField);
  flat.bias_coefficient = {0, 0};
  const auto st = sample_step(flat, rng);
  for (float f : bias_field(st, {4, 4, 4})) EXPECT_EQ(f, 1.0f);
}

TEST(Composite, AppliesWholeChainInOrder) {
  AugmentationPolicy policy;
  policy.composite = {of(TransformKind::Flip), of(TransformKind::Noise), of(TransformKind::RandomBiasField)};
  policy.composite_probability = 1.0;
  auto rng = rng_for_case(1, 0);
  const auto t = sample_transform(policy, rng);
  ASSERT_EQ(t.steps.size(), 3u);
  EXPECT_EQ(t.steps[0].kind, TransformKind::Flip);
  EXPECT_EQ(t.steps[2].kind, TransformKind::RandomBiasField);
}

TEST(Augment, MisalignedPairRejected) {
  const auto p = small_phantom();
  LabelMap wrong = p.labels;
  wrong.data = Grid<std::int32_t>({3, 3, 3}, 0);
  try {
    (void)apply_transform({}, p.volume, wrong);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MisalignedPair);
  }
}

TEST(AugmentConfig, ParsingAndValidation) {
  const auto policy = policy_from_json(
      {{"singles", {{{"kind", "flip"}, {"probability", 0.5}, {"flip_probability", 0.3}}}},
       {"composite", {{"probability", 0.2}, {"transforms", {{{"kind", "affine"}, {"scale", {0.8, 1.2}}}}}}}},
      11);
  ASSERT_EQ(policy.singles.size(), 1u);
  EXPECT_DOUBLE_EQ(policy.singles[0].probability, 0.5);
  EXPECT_DOUBLE_EQ(policy.singles[0].params.flip_probability[2], 0.3);
  EXPECT_DOUBLE_EQ(policy.composite[0].scale.lo, 0.8);
  EXPECT_EQ(policy.seed, 11u);
  EXPECT_THROW(policy_from_json({{"singles", {{{"kind", "warp"}}}}}, 0), Error);
  EXPECT_THROW(policy_from_json({{"singles", {{{"kind", "affine"}, {"scale", {1.2, 0.8}}}}}}, 0), Error);
  EXPECT_THROW(policy_from_json({{"singles", {{{"kind", "flip"}, {"probability", 1.5}}}}}, 0), Error);
  EXPECT_THROW(policy_from_json({{"mixup", true}}, 0), Error);
}
