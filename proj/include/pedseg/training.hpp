#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pedseg/augmentation.hpp"
#include "pedseg/error.hpp"
#include "pedseg/inference.hpp"
#include "pedseg/log.hpp"
#include "pedseg/losses.hpp"
#include "pedseg/metrics.hpp"
#include "pedseg/nn/architecture.hpp"
#include "pedseg/nn/checkpoint.hpp"
#include "pedseg/nn/model.hpp"
#include "pedseg/nn/optimizer.hpp"
#include "pedseg/volume_io.hpp"

namespace pedseg {

struct TrainConfig {
  nn::ArchitectureSpec spec = nn::spec_for_variant("unet3d");
  loss::LossConfig loss;
  aug::AugmentationPolicy augmentation;
  nn::OptimizerConfig optimizer;
  RegionMapping region_mapping;
  int batch_size = 2;
  int max_epochs = 100;
  int steps_per_epoch = 0;  // 0: one pass over the training cases per epoch
  std::uint64_t max_steps = 0;  // 0: no cap beyond max_epochs
  Shape3 patch{96, 96, 96};
  double foreground_fraction = 0.5;
  int validation_interval = 1;  // epochs
  int early_stop_patience = 10;  // validations without improvement
  double validation_threshold = 0.5;  // probability
  double validation_overlap = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    spec.validate();
    loss.validate();
    augmentation.validate();
    optimizer.validate();
    region_mapping.validate();
    auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (max_epochs < 1) fail("max_epochs must be >= 1");
    if (steps_per_epoch < 0) fail("steps_per_epoch must be >= 0");
    if (validation_interval < 1) fail("validation_interval must be >= 1");
    if (early_stop_patience < 1) fail("early_stop_patience must be >= 1");
    if (!(foreground_fraction >= 0.0 && foreground_fraction <= 1.0)) fail("foreground_fraction must be in [0, 1]");
    if (!(validation_threshold > 0.0 && validation_threshold < 1.0)) fail("validation_threshold must be in (0, 1)");
    if (!(validation_overlap >= 0.0 && validation_overlap < 1.0)) fail("validation_overlap must be in [0, 1)");
    const int d = spec.divisor();
    for (int a = 0; a < 3; ++a)
      if (patch[a] < 1 || patch[a] % d != 0)
        throw Error(ErrorCode::IndivisibleShape,
                    "patch " + patch.str() + " must be a positive multiple of " + std::to_string(d) + " per axis");
  }
};

/// One labeled case held in memory, intensities already normalized.
struct TrainingCase {
  MultiModalVolume volume;
  LabelMap labels;
};

inline std::vector<TrainingCase> load_training_cases(const DatasetManifest& manifest, const std::string& split,
                                                     const RegionMapping& mapping) {
  std::set<std::int32_t> vocab{0};
  vocab.insert(mapping.wt_labels.begin(), mapping.wt_labels.end());
  std::vector<TrainingCase> out;
  for (const ManifestEntry* e : manifest.with_split(split)) {
    if (!e->label) continue;
    TrainingCase c{normalize_intensities(load_volume(*e)), load_label_map(*e->label, vocab, e->case_id)};
    if (!(c.labels.data.shape() == c.volume.shape()))
      throw Error(ErrorCode::ShapeMismatch, "label map of '" + e->case_id + "' does not match its volume");
    out.push_back(std::move(c));
  }
  return out;
}

struct TrainLogRecord {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<std::array<double, 3>> val_dice;
};

inline nlohmann::ordered_json to_json(const TrainLogRecord& r) {
  nlohmann::ordered_json j{{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}};
  if (r.val_dice) j["val_dice"] = {{"ET", (*r.val_dice)[0]}, {"TC", (*r.val_dice)[1]}, {"WT", (*r.val_dice)[2]}};
  return j;
}

struct TrainOptions {
  std::filesystem::path output_dir;  // empty: keep everything in memory
  std::optional<std::filesystem::path> resume_from;
  bool quiet = false;
};

struct TrainResult {
  nn::Checkpoint best;
  nn::Checkpoint last;
  std::vector<TrainLogRecord> log;
  bool stopped_early = false;
};

enum class RngPurpose : std::uint32_t { Init = 1, CaseChoice, Patch, Augment, Dropout };

/// Every random quantity during training comes from (seed, step, purpose,
/// item), so restoring (seed, step) restores all random streams.
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t step, RngPurpose purpose, std::uint64_t item = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),     static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step),     static_cast<std::uint32_t>(step >> 32),
                    static_cast<std::uint32_t>(purpose),  static_cast<std::uint32_t>(item),
                    static_cast<std::uint32_t>(item >> 32)};
  return std::mt19937_64(seq);
}

namespace detail {

/// Crops (zero-padding where the patch leaves the volume) a training patch.
inline TrainingCase crop_case(const TrainingCase& c, std::array<int, 3> o, const Shape3& patch) {
  TrainingCase out;
  out.volume.data = MultiGrid<float>(c.volume.data.channels(), patch, 0.0f);
  out.volume.spacing = c.volume.spacing;
  out.volume.affine = c.volume.affine;
  out.volume.case_id = c.volume.case_id;
  out.labels.data = Grid<std::int32_t>(patch, 0);
  out.labels.label_vocabulary = c.labels.label_vocabulary;
  out.labels.case_id = c.labels.case_id;
  out.labels.spacing = c.labels.spacing;
  out.labels.affine = c.labels.affine;
  const Shape3& s = c.volume.shape();
  for (int z = 0; z < patch.nz; ++z)
    for (int y = 0; y < patch.ny; ++y)
      for (int x = 0; x < patch.nx; ++x) {
        const int sx = x + o[0], sy = y + o[1], sz = z + o[2];
        if (!s.contains(sx, sy, sz)) continue;
        for (int ch = 0; ch < c.volume.data.channels(); ++ch) out.volume.data.at(ch, x, y, z) = c.volume.data.at(ch, sx, sy, sz);
        out.labels.data(x, y, z) = c.labels.data(sx, sy, sz);
      }
  return out;
}

inline int random_int(std::mt19937_64& rng, int lo, int hi) {  // inclusive
  if (hi <= lo) return lo;
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

/// Patch origin: with probability `fg` centred on a random tumour voxel,
/// otherwise uniform over the volume.
inline std::array<int, 3> sample_origin(const TrainingCase& c, const Shape3& patch, double fg, std::mt19937_64& rng) {
  const Shape3& s = c.volume.shape();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool want_fg = u(rng) < fg;
  std::array<int, 3> o{};
  if (want_fg) {
    std::vector<std::size_t> fg_voxels;
    for (std::size_t i = 0; i < c.labels.data.size(); ++i)
      if (c.labels.data[i] != 0) fg_voxels.push_back(i);
    if (!fg_voxels.empty()) {
      const std::size_t i = fg_voxels[rng() % fg_voxels.size()];
      const std::array<int, 3> p{static_cast<int>(i % s.nx), static_cast<int>((i / s.nx) % s.ny),
                                 static_cast<int>(i / (static_cast<std::size_t>(s.nx) * s.ny))};
      for (int a = 0; a < 3; ++a) o[a] = std::clamp(p[a] - patch[a] / 2, 0, std::max(0, s[a] - patch[a]));
      return o;
    }
  }
  for (int a = 0; a < 3; ++a) o[a] = random_int(rng, 0, std::max(0, s[a] - patch[a]));
  return o;
}

inline std::vector<double> region_targets(const LabelMap& lm, const RegionMapping& mapping) {
  const std::size_t n = lm.data.size();
  std::vector<double> y(static_cast<std::size_t>(kRegions) * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = lm.data[i];
    y[i] = mapping.et_labels.contains(v);
    y[n + i] = mapping.tc_labels.contains(v);
    y[2 * n + i] = mapping.wt_labels.contains(v);
  }
  return y;
}

}  // namespace detail

/// Mean plain Dice per region (ET, TC, WT) after binarizing sigmoid
/// probabilities at `threshold`.
template <Predictor P>
std::array<double, 3> validate(const P& model, const std::vector<TrainingCase>& cases, const RegionMapping& mapping,
                               double threshold, const SlidingWindowConfig& window, int divisor = 1) {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  if (cases.empty()) return mean;
  const double cut = std::log(threshold / (1.0 - threshold));
  for (const auto& c : cases) {
    const LogitsVolume lv = predict_logits(model, c.volume, window, divisor);
    const RegionMaskSet gt = labels_to_regions(c.labels, mapping);
    const RegionMaskSet pred = fuse_group(std::span<const LogitsVolume>(&lv, 1), cut);
    for (int r = 0; r < kRegions; ++r) mean[r] += metrics::dice_score(pred.region(r), gt.region(r));
  }
  for (double& m : mean) m /= static_cast<double>(cases.size());
  return mean;
}

/// One optimizer step over `batch_size` patches; returns the mean loss.
inline double train_step(const TrainConfig& cfg, const std::vector<TrainingCase>& cases, nn::Model& model,
                         nn::Optimizer& opt, std::uint64_t step) {
  model.zero_grad();
  double total = 0.0;
  for (int b = 0; b < cfg.batch_size; ++b) {
    auto choice = derived_rng(cfg.seed, step, RngPurpose::CaseChoice, b);
    const TrainingCase& src = cases[choice() % cases.size()];
    auto patch_rng = derived_rng(cfg.seed, step, RngPurpose::Patch, b);
    TrainingCase patch = detail::crop_case(src, detail::sample_origin(src, cfg.patch, cfg.foreground_fraction, patch_rng),
                                           cfg.patch);
    auto aug_rng = derived_rng(cfg.seed, step, RngPurpose::Augment, b);
    const aug::ConcreteTransform t = aug::sample_transform(cfg.augmentation, aug_rng);
    if (!t.is_identity()) std::tie(patch.volume, patch.labels) = aug::apply_transform(t, patch.volume, patch.labels);

    auto drop_rng = derived_rng(cfg.seed, step, RngPurpose::Dropout, b);
    const nn::Tensor logits = model.forward_train(patch.volume.data, drop_rng());
    const std::vector<double> y = detail::region_targets(patch.labels, cfg.region_mapping);
    std::vector<double> p(logits.size());
    const auto& z = logits.storage();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(z[i])));
    const loss::PredictionPair<double> pair{y, p, kRegions};
    pair.check();
    const auto lg = loss::loss_with_grad(pair, cfg.loss);
    if (!std::isfinite(lg.value))
      throw Error(ErrorCode::DivergedLoss, "non-finite loss at step " + std::to_string(step) + " on case '" +
                                               src.volume.case_id + "'; lower the learning rate or check the inputs");
    total += lg.value;
    nn::Tensor grad(kRegions, logits.shape(), 0.0f);
    auto& g = grad.storage();
    for (std::size_t i = 0; i < p.size(); ++i)
      g[i] = static_cast<float>(lg.grad[i] * p[i] * (1.0 - p[i]) / cfg.batch_size);
    model.backward(grad);
  }
  opt.step(model);
  return total / cfg.batch_size;
}

/// Trains one model. Validation runs every `validation_interval` epochs on
/// `val_cases` (the training cases when none are given); the best mean Dice
/// selects the returned checkpoint.
inline TrainResult train(const TrainConfig& cfg, const std::vector<TrainingCase>& train_cases,
                         std::vector<TrainingCase> val_cases, const TrainOptions& opts = {}) {
  cfg.validate();
  if (train_cases.empty()) throw Error(ErrorCode::EmptyDataset, "no labeled training cases");
  const bool val_on_train = val_cases.empty();
  if (val_on_train) val_cases = train_cases;
  const int divisor = cfg.spec.divisor();
  const std::uint64_t spe = cfg.steps_per_epoch > 0
                                ? static_cast<std::uint64_t>(cfg.steps_per_epoch)
                                : (train_cases.size() + cfg.batch_size - 1) / static_cast<std::uint64_t>(cfg.batch_size);
  std::uint64_t total_steps = spe * static_cast<std::uint64_t>(cfg.max_epochs);
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);
  SlidingWindowConfig window;
  window.patch = cfg.patch;
  window.overlap = cfg.validation_overlap;

  const bool to_disk = !opts.output_dir.empty();
  const auto ckpt_dir = opts.output_dir / "checkpoints";
  const auto log_path = opts.output_dir / "train_log.jsonl";

  TrainResult result;
  nn::Checkpoint state;
  if (opts.resume_from) {
    state = nn::load_checkpoint(*opts.resume_from);
    if (!(state.model.spec() == cfg.spec))
      throw Error(ErrorCode::InvalidConfig, "resume checkpoint architecture differs from the configured one");
    if (state.seed != cfg.seed) throw Error(ErrorCode::InvalidConfig, "resume checkpoint was trained with another seed");
    const auto best_path = opts.resume_from->parent_path() / "best.ckpt";
    result.best = std::filesystem::exists(best_path) ? nn::load_checkpoint(best_path) : state;
    if (state.extra.contains("log"))
      for (const auto& r : state.extra["log"]) {
        TrainLogRecord rec{r.at("step").get<std::uint64_t>(), r.at("loss").get<double>(), r.at("lr").get<double>(),
                           std::nullopt};
        if (r.contains("val_dice")) {
          const auto& v = r["val_dice"];
          rec.val_dice = std::array<double, 3>{v["ET"].get<double>(), v["TC"].get<double>(), v["WT"].get<double>()};
        }
        result.log.push_back(rec);
      }
  } else {
    auto init = derived_rng(cfg.seed, 0, RngPurpose::Init);
    state.model = nn::Model(cfg.spec, init());
    state.optimizer = nn::Optimizer(cfg.optimizer, state.model);
    state.seed = cfg.seed;
  }
  state.extra = nlohmann::json::object();

  std::ofstream log_file;
  if (to_disk) {
    std::filesystem::create_directories(ckpt_dir);
    log_file.open(log_path, std::ios::trunc);
    for (const auto& r : result.log) log_file << to_json(r).dump() << '\n';
  }
  auto snapshot = [&](const nn::Checkpoint& s) {
    nn::Checkpoint c = s;
    nlohmann::json log = nlohmann::json::array();
    for (const auto& r : result.log) log.push_back(nlohmann::json::parse(to_json(r).dump()));
    c.extra["log"] = log;
    return c;
  };

  bool stop = false;
  for (std::uint64_t step = state.step; step < total_steps && !stop; ++step) {
    const double loss = train_step(cfg, train_cases, state.model, state.optimizer, step);
    state.step = step + 1;
    TrainLogRecord rec{state.step, loss, cfg.optimizer.learning_rate, std::nullopt};
    const bool epoch_end = state.step % spe == 0;
    if (epoch_end) {
      state.epoch = static_cast<int>(state.step / spe);
      if (state.epoch % cfg.validation_interval == 0) {
        const auto dice = validate(state.model, val_cases, cfg.region_mapping, cfg.validation_threshold, window, divisor);
        rec.val_dice = dice;
        const double score = (dice[0] + dice[1] + dice[2]) / 3.0;
        if (score > state.best_score) {
          state.best_score = score;
          state.best_val_dice = dice;
          state.validations_since_improvement = 0;
        } else {
          ++state.validations_since_improvement;
        }
        if (state.validations_since_improvement == 0) {
          result.best = snapshot(state);
          result.best.extra["log"].push_back(nlohmann::json::parse(to_json(rec).dump()));
          if (to_disk) nn::save_checkpoint(result.best, ckpt_dir / "best.ckpt");
        }
        if (state.validations_since_improvement >= cfg.early_stop_patience) {
          stop = true;
          result.stopped_early = true;
        }
      }
    }
    result.log.push_back(rec);
    if (to_disk) log_file << to_json(rec).dump() << '\n' << std::flush;
    if (!opts.quiet) log_info("train_step", to_json(rec));
    if (to_disk && (epoch_end || stop || state.step == total_steps))
      nn::save_checkpoint(snapshot(state), ckpt_dir / "last.ckpt");
  }
  result.last = snapshot(state);
  if (result.best.best_score < 0.0) {
    // Never validated: the last state is the only candidate.
    result.best = result.last;
    if (to_disk) nn::save_checkpoint(result.best, ckpt_dir / "best.ckpt");
  }
  return result;
}

inline TrainResult train(const TrainConfig& cfg, const DatasetManifest& manifest, const TrainOptions& opts = {}) {
  cfg.validate();
  auto train_cases = load_training_cases(manifest, "train", cfg.region_mapping);
  if (train_cases.empty()) throw Error(ErrorCode::EmptyDataset, "manifest has no labeled training cases");
  return train(cfg, train_cases, load_training_cases(manifest, "val", cfg.region_mapping), opts);
}

}  // namespace pedseg
