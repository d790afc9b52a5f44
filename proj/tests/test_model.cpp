#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pedseg/nn/checkpoint.hpp"
#include "pedseg/nn/model.hpp"
#include "pedseg/nn/optimizer.hpp"
#include "test_util.hpp"

using namespace pedseg;
using namespace pedseg::nn;

namespace {

oracle::ArchCounts counts_of(const ArchitectureSpec& s) {
  oracle::ArchCounts a;
  a.onet = s.family == Family::ONet3D;
  a.in = s.in_channels;
  a.out = s.out_channels;
  a.base = s.base_channels;
  a.depth = s.depth;
  a.convs = s.convs_per_block;
  a.k = s.kernel_size;
  a.attention = s.attention_gates;
  a.norm = s.instance_norm;
  return a;
}

Tensor random_input(std::mt19937_64& rng, int channels, Shape3 s) {
  std::normal_distribution<float> n;
  Tensor t(channels, s);
  for (float& v : t.storage()) v = n(rng);
  return t;
}

ArchitectureSpec small(std::string_view variant, int base = 4, int depth = 3) {
  auto s = spec_for_variant(variant);
  s.base_channels = base;
  s.depth = depth;
  return s;
}

}  // namespace

TEST(Variants, AllEightProduceThreeChannelOutputOfInputShape) {
  std::mt19937_64 rng(1);
  for (auto name : kVariantNames) {
    const Model m(small(name), 7);
    for (Shape3 s : {Shape3{8, 8, 8}, Shape3{16, 8, 12}}) {
      const Tensor y = m.forward(random_input(rng, 4, s));
      EXPECT_EQ(y.channels(), 3) << name;
      EXPECT_EQ(y.shape(), s) << name;
      for (float v : y.storage()) ASSERT_TRUE(std::isfinite(v)) << name;
    }
  }
}

TEST(Variants, ParameterCountsMatchClosedForm) {
  for (auto name : kVariantNames) {
    for (auto spec : {spec_for_variant(name), small(name), small(name, 3, 2), small(name, 8, 5)}) {
      const Model m(spec, 1);
      EXPECT_EQ(static_cast<long long>(m.parameter_count()), oracle::param_count(counts_of(spec))) << name;
    }
  }
  auto no_norm = small("unet3d");
  no_norm.instance_norm = false;
  EXPECT_EQ(static_cast<long long>(Model(no_norm, 1).parameter_count()), oracle::param_count(counts_of(no_norm)));
}

TEST(Variants, StructuralRelations) {
  const auto count = [](std::string_view n) { return Model(spec_for_variant(n), 0).parameter_count(); };
  EXPECT_EQ(count("unet3d_gelu"), count("unet3d"));
  EXPECT_EQ(count("unet3d_dropout"), count("unet3d"));
  EXPECT_LT(count("unet3d_singleconv"), count("unet3d"));
  EXPECT_GT(count("unet3d_attention"), count("unet3d"));
  EXPECT_LT(count("onet3d_singleconv_k1"), count("onet3d_doubleconv_k1"));
  EXPECT_LT(count("onet3d_singleconv_k1"), count("onet3d_singleconv_k5"));
  const Model u(spec_for_variant("unet3d"), 0), o(spec_for_variant("onet3d_singleconv_k1"), 0);
  EXPECT_EQ(u.output_conv_in_channels(), 32);
  EXPECT_EQ(o.output_conv_in_channels(), 32 + (32 + 64 + 128 + 256));  // last decoder map plus every encoder level
}

TEST(Variants, ErrorsForBadSpecsAndShapes) {
  try {
    (void)spec_for_variant("vnet");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownVariant);
  }
  auto bad = small("unet3d");
  bad.kernel_size = 2;
  EXPECT_THROW(Model(bad, 0), Error);

  const Model m(small("unet3d"), 0);  // divisor 4
  std::mt19937_64 rng(2);
  try {
    (void)m.forward(random_input(rng, 4, {8, 8, 6}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IndivisibleShape);
  }
  try {
    (void)m.forward(random_input(rng, 3, {8, 8, 8}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(Model, InitializationIsSeeded) {
  std::mt19937_64 rng(3);
  const Tensor x = random_input(rng, 4, {8, 8, 8});
  const auto spec = small("unet3d_attention");
  EXPECT_EQ(Model(spec, 5).forward(x), Model(spec, 5).forward(x));
  EXPECT_NE(Model(spec, 5).forward(x), Model(spec, 6).forward(x));
}

TEST(Model, DropoutOnlyInTrainMode) {
  std::mt19937_64 rng(4);
  const Tensor x = random_input(rng, 4, {8, 8, 8});
  const Model m(small("unet3d_dropout"), 1);
  EXPECT_EQ(m.forward(x), m.forward(x));
  EXPECT_EQ(m.forward(x, true, 9), m.forward(x, true, 9));
  EXPECT_NE(m.forward(x, true, 9), m.forward(x, true, 10));
  EXPECT_NE(m.forward(x, true, 9), m.forward(x));
}

// L = sum(w * logits); analytic parameter gradients against central
// differences, compared as whole vectors to absorb float rounding.
TEST(Model, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (auto name : {"unet3d_gelu", "onet3d_singleconv_k1"}) {
    for (bool attention : {false, true}) {
      auto spec = small(name, 2, 2);
      spec.activation = Activation::GELU;
      spec.attention_gates = attention;
      Model m(spec, 11);
      const Tensor x = random_input(rng, 4, {4, 4, 4});
      const Tensor w = random_input(rng, 3, {4, 4, 4});
      const auto loss = [&](const Model& mm) {
        const Tensor y = mm.forward(x);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(w.storage()[i]) * y.storage()[i];
        return s;
      };
      m.zero_grad();
      (void)m.forward_train(x, 0);
      m.backward(w);

      double num = 0, den = 0;
      std::uniform_real_distribution<double> pick(0, 1);
      for (std::size_t p = 0; p < m.parameters().size(); ++p) {
        const auto n = m.parameters()[p].size();
        for (int trial = 0; trial < 3; ++trial) {
          const auto i = static_cast<std::size_t>(pick(rng) * n);
          float& v = m.parameters()[p].value[i];
          const float keep = v;
          const float h = 1e-2f;
          v = keep + h;
          const double up = loss(m);
          v = keep - h;
          const double dn = loss(m);
          v = keep;
          const double fd = (up - dn) / (2.0 * h);
          const double an = m.parameters()[p].grad[i];
          num += (fd - an) * (fd - an);
          den += fd * fd;
        }
      }
      EXPECT_LT(std::sqrt(num / den), 2e-2) << name << " attention=" << attention;
    }
  }
}

TEST(Model, GradientsAccumulateUntilZeroed) {
  std::mt19937_64 rng(6);
  Model m(small("unet3d", 2, 2), 1);
  const Tensor x = random_input(rng, 4, {4, 4, 4});
  const Tensor g = random_input(rng, 3, {4, 4, 4});
  m.zero_grad();
  (void)m.forward_train(x, 0);
  m.backward(g);
  const auto once = m.parameters()[0].grad;
  (void)m.forward_train(x, 0);
  m.backward(g);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(m.parameters()[0].grad[i], 2 * once[i], 1e-4f);
  m.zero_grad();
  for (float v : m.parameters()[0].grad) EXPECT_EQ(v, 0.0f);
}

TEST(Optimizer, StepReducesSimpleObjective) {
  std::mt19937_64 rng(7);
  Model m(small("unet3d", 2, 2), 1);
  OptimizerConfig oc;
  oc.learning_rate = 1e-2;
  Optimizer opt(oc, m);
  const Tensor x = random_input(rng, 4, {4, 4, 4});
  const auto objective = [&] {
    const Tensor y = m.forward(x);
    double s = 0;
    for (float v : y.storage()) s += static_cast<double>(v) * v;
    return s;
  };
  const double before = objective();
  for (int i = 0; i < 20; ++i) {
    m.zero_grad();
    Tensor y = m.forward_train(x, 0);
    for (float& v : y.storage()) v *= 2.0f;
    m.backward(y);
    opt.step(m);
  }
  EXPECT_LT(objective(), 0.5 * before);
  EXPECT_EQ(opt.steps(), 20u);
  oc.kind = "lion";
  EXPECT_THROW(Optimizer(oc, m), Error);
}

TEST(Checkpoint, RoundTripThenOneStepIsBitwiseEqual) {
  const auto dir = testutil::scratch_dir("model_ckpt");
  std::mt19937_64 rng(8);
  const Tensor x = random_input(rng, 4, {8, 8, 8});
  const Tensor g = random_input(rng, 3, {8, 8, 8});
  Checkpoint ck;
  ck.model = Model(small("unet3d_attention"), 3);
  ck.optimizer = Optimizer({}, ck.model);
  auto step = [&](Model& m, Optimizer& o) {
    m.zero_grad();
    (void)m.forward_train(x, 1);
    m.backward(g);
    o.step(m);
  };
  step(ck.model, ck.optimizer);
  ck.step = 1;
  ck.extra["note"] = "kept";
  save_checkpoint(ck, dir / "a.ckpt");
  Checkpoint back = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(back.model.spec(), ck.model.spec());
  EXPECT_EQ(back.step, 1u);
  EXPECT_EQ(back.extra["note"], "kept");

  step(ck.model, ck.optimizer);
  step(back.model, back.optimizer);
  for (std::size_t p = 0; p < ck.model.parameters().size(); ++p)
    ASSERT_EQ(ck.model.parameters()[p].value, back.model.parameters()[p].value);
  EXPECT_EQ(ck.model.forward(x), back.model.forward(x));
}

TEST(Checkpoint, MissingAndCorruptFiles) {
  const auto dir = testutil::scratch_dir("model_ckpt_bad");
  try {
    (void)load_checkpoint(dir / "nope.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingCheckpoint);
  }
  {
    std::ofstream f(dir / "junk.ckpt", std::ios::binary);
    f << "not a checkpoint";
  }
  try {
    (void)load_checkpoint(dir / "junk.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CorruptFile);
  }
}
