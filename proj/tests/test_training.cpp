#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "pedseg/phantom.hpp"
#include "pedseg/training.hpp"
#include "test_util.hpp"

using namespace pedseg;

namespace {

TrainConfig tiny_config(std::uint64_t seed = 1) {
  TrainConfig c;
  c.spec.base_channels = 2;
  c.spec.depth = 2;
  c.region_mapping = phantom_region_mapping();
  c.patch = {8, 8, 8};
  c.batch_size = 2;
  c.steps_per_epoch = 3;
  c.max_epochs = 4;
  c.optimizer.learning_rate = 1e-2;
  c.seed = seed;
  return c;
}

std::vector<TrainingCase> phantom_cases(int n, int size = 16) {
  std::vector<TrainingCase> out;
  for (int i = 0; i < n; ++i) {
    auto p = make_phantom(100 + i, {{size, size, size}}, "ph" + std::to_string(i));
    out.push_back({normalize_intensities(p.volume), p.labels});
  }
  return out;
}

std::vector<double> losses(const TrainResult& r) {
  std::vector<double> v;
  for (const auto& rec : r.log) v.push_back(rec.loss);
  return v;
}

// Logit +20 where input channel r is 1, -20 elsewhere.
struct IndicatorStub {
  nn::Tensor forward(const nn::Tensor& x) const {
    nn::Tensor out(kRegions, x.shape());
    for (int c = 0; c < kRegions; ++c)
      for (std::size_t i = 0; i < x.voxels(); ++i) out.channel(c)[i] = x.channel(c)[i] > 0.5f ? 20.0f : -20.0f;
    return out;
  }
};

}  // namespace

TEST(DerivedRng, StreamsDifferByPurposeAndStep) {
  auto a = derived_rng(1, 5, RngPurpose::Patch, 0), b = derived_rng(1, 5, RngPurpose::Patch, 0);
  EXPECT_EQ(a(), b());
  EXPECT_NE(derived_rng(1, 5, RngPurpose::Patch, 0)(), derived_rng(1, 6, RngPurpose::Patch, 0)());
  EXPECT_NE(derived_rng(1, 5, RngPurpose::Patch, 0)(), derived_rng(1, 5, RngPurpose::Augment, 0)());
  EXPECT_NE(derived_rng(1, 5, RngPurpose::Patch, 0)(), derived_rng(1, 5, RngPurpose::Patch, 1)());
  EXPECT_NE(derived_rng(1, 5, RngPurpose::Patch, 0)(), derived_rng(2, 5, RngPurpose::Patch, 0)());
}

TEST(PatchSampling, ForegroundBiasAndBounds) {
  const auto cases = phantom_cases(1, 24);
  const Shape3 patch{8, 8, 8};
  int fg_hits = 0;
  const int n = 400;
  for (int i = 0; i < n; ++i) {
    auto rng = derived_rng(3, i, RngPurpose::Patch);
    const auto o = detail::sample_origin(cases[0], patch, 1.0, rng);
    for (int a = 0; a < 3; ++a) {
      EXPECT_GE(o[a], 0);
      EXPECT_LE(o[a] + patch[a], 24);
    }
    const auto c = detail::crop_case(cases[0], o, patch);
    fg_hits += std::any_of(c.labels.data.begin(), c.labels.data.end(), [](auto v) { return v != 0; });
  }
  EXPECT_EQ(fg_hits, n);
}

TEST(PatchSampling, CropPadsSmallCases) {
  const auto cases = phantom_cases(1, 6);
  auto rng = derived_rng(0, 0, RngPurpose::Patch);
  const auto c = detail::crop_case(cases[0], detail::sample_origin(cases[0], {8, 8, 8}, 0.5, rng), {8, 8, 8});
  EXPECT_EQ(c.volume.shape(), (Shape3{8, 8, 8}));
  EXPECT_EQ(c.labels.data.shape(), (Shape3{8, 8, 8}));
}

TEST(Train, LossDecreases) {
  auto cfg = tiny_config();
  cfg.steps_per_epoch = 40;
  cfg.max_epochs = 4;
  cfg.spec.base_channels = 4;
  const auto r = train(cfg, phantom_cases(2), {}, {.quiet = true});
  const auto l = losses(r);
  ASSERT_EQ(l.size(), 160u);
  const double head = std::accumulate(l.begin(), l.begin() + 10, 0.0);
  const double tail = std::accumulate(l.end() - 10, l.end(), 0.0);
  EXPECT_LT(tail, 0.8 * head);
}

TEST(Train, CurvesAreBitwiseReproducible) {
  auto cfg = tiny_config(7);
  cfg.augmentation.singles.push_back({aug::TransformParams{}, 0.5});  // flips
  cfg.spec.dropout_rate = 0.2;
  const auto cases = phantom_cases(2);
  const auto a = train(cfg, cases, {}, {.quiet = true});
  const auto b = train(cfg, cases, {}, {.quiet = true});
  EXPECT_EQ(losses(a), losses(b));
  for (std::size_t p = 0; p < a.last.model.parameters().size(); ++p)
    ASSERT_EQ(a.last.model.parameters()[p].value, b.last.model.parameters()[p].value);
  cfg.seed = 8;
  EXPECT_NE(losses(train(cfg, cases, {}, {.quiet = true})), losses(a));
}

TEST(Train, ValidationRecordsAndBestCheckpoint) {
  const auto cfg = tiny_config();
  const auto r = train(cfg, phantom_cases(2), phantom_cases(1), {.quiet = true});
  ASSERT_EQ(r.log.size(), 12u);
  int validated = 0;
  double best = -1;
  for (const auto& rec : r.log)
    if (rec.val_dice) {
      ++validated;
      EXPECT_EQ(rec.step % 3, 0u);
      best = std::max(best, ((*rec.val_dice)[0] + (*rec.val_dice)[1] + (*rec.val_dice)[2]) / 3.0);
    }
  EXPECT_EQ(validated, 4);
  EXPECT_DOUBLE_EQ(r.best.best_score, best);
  EXPECT_EQ(r.last.step, 12u);
}

TEST(Train, WritesCheckpointsAndLog) {
  const auto dir = testutil::scratch_dir("train_out");
  const auto cfg = tiny_config();
  (void)train(cfg, phantom_cases(1), {}, {.output_dir = dir, .quiet = true});
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "best.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "last.ckpt"));
  std::ifstream log(dir / "train_log.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("step") && j.contains("loss") && j.contains("lr"));
  }
  EXPECT_EQ(lines, 12);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto cases = phantom_cases(2);
  auto cfg = tiny_config(3);
  const auto full = train(cfg, cases, {}, {.quiet = true});

  const auto dir = testutil::scratch_dir("train_resume");
  auto part = cfg;
  part.max_steps = 6;
  (void)train(part, cases, {}, {.output_dir = dir, .quiet = true});
  const auto resumed = train(cfg, cases, {}, {.output_dir = dir, .resume_from = dir / "checkpoints" / "last.ckpt", .quiet = true});

  EXPECT_EQ(losses(resumed), losses(full));
  for (std::size_t p = 0; p < full.last.model.parameters().size(); ++p)
    ASSERT_EQ(resumed.last.model.parameters()[p].value, full.last.model.parameters()[p].value);
  EXPECT_EQ(resumed.best.best_score, full.best.best_score);
}

TEST(Train, EarlyStopping) {
  auto cfg = tiny_config();
  cfg.optimizer.learning_rate = 1e-9;  // no progress, so validation never improves
  cfg.steps_per_epoch = 1;
  cfg.max_epochs = 50;
  cfg.early_stop_patience = 2;
  const auto r = train(cfg, phantom_cases(1), {}, {.quiet = true});
  EXPECT_TRUE(r.stopped_early);
  EXPECT_LT(r.log.size(), 50u);
}

TEST(Train, Errors) {
  const auto cfg = tiny_config();
  try {
    (void)train(cfg, std::vector<TrainingCase>{}, {}, {.quiet = true});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyDataset);
  }
  auto bad = cfg;
  bad.patch = {8, 8, 7};
  try {
    bad.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IndivisibleShape);
  }
  bad = cfg;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), Error);
  bad = cfg;
  bad.region_mapping.et_labels = {9};
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Validate, PerfectAndEmptyPredictors) {
  auto p = make_phantom(4, {{12, 12, 12}});
  const auto mapping = phantom_region_mapping();
  const auto gt = labels_to_regions(p.labels, mapping);
  TrainingCase c{p.volume, p.labels};
  for (int r = 0; r < kRegions; ++r)
    for (std::size_t i = 0; i < gt.wt.size(); ++i) c.volume.data.channel(r)[i] = gt.region(r)[i];
  SlidingWindowConfig w;
  w.patch = {8, 8, 8};
  const auto perfect = validate(IndicatorStub{}, {c}, mapping, 0.5, w);
  for (double d : perfect) EXPECT_DOUBLE_EQ(d, 1.0);

  for (float& v : c.volume.data.storage()) v = 0.0f;
  const auto empty = validate(IndicatorStub{}, {c}, mapping, 0.5, w);
  for (double d : empty) EXPECT_DOUBLE_EQ(d, 0.0);
}
