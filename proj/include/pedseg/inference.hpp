#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pedseg/error.hpp"
#include "pedseg/grid.hpp"
#include "pedseg/log.hpp"
#include "pedseg/nn/checkpoint.hpp"
#include "pedseg/nn/model.hpp"
#include "pedseg/volume_io.hpp"

namespace pedseg {

/// Anything that maps a (C, X, Y, Z) tensor to a (3, X, Y, Z) tensor of logits.
template <class P>
concept Predictor = requires(const P& p, const nn::Tensor& x) {
  { p.forward(x) } -> std::convertible_to<nn::Tensor>;
};

/// A loaded model ready for inference.
struct ModelHandle {
  nn::Model model;
  std::uint64_t trained_steps = 0;
  std::string name;

  nn::Tensor forward(const nn::Tensor& x) const { return model.forward(x); }
  int divisor() const { return model.spec().divisor(); }
};

inline ModelHandle load_model(const std::filesystem::path& ckpt) {
  nn::Checkpoint ck = nn::load_checkpoint(ckpt);
  ModelHandle h{std::move(ck.model), ck.step, {}};
  h.name = h.model.spec().variant_name;
  return h;
}

struct LogitsVolume {
  nn::Tensor data;  // 3 region channels
  std::string source_model;
  std::string case_id;
  Spacing spacing{1.0, 1.0, 1.0};
  Affine affine = identity_affine();

  const Shape3& shape() const noexcept { return data.shape(); }

  void validate() const {
    if (data.channels() != kRegions)
      throw Error(ErrorCode::ShapeMismatch, "logits must have 3 region channels, got " + std::to_string(data.channels()));
    for (float v : data.storage())
      if (!std::isfinite(v)) throw Error(ErrorCode::InvalidSpec, "non-finite logit in case " + case_id);
  }
};

struct SlidingWindowConfig {
  Shape3 patch{64, 64, 64};
  double overlap = 0.5;
  bool gaussian = true;
  double sigma_scale = 0.125;  // sigma = patch * sigma_scale per axis
  std::size_t max_patch_voxels = std::size_t{1} << 24;

  void validate() const {
    if (patch.nx <= 0 || patch.ny <= 0 || patch.nz <= 0) throw Error(ErrorCode::InvalidConfig, "patch must be positive");
    if (!(overlap >= 0.0 && overlap < 1.0)) throw Error(ErrorCode::InvalidConfig, "overlap must lie in [0, 1)");
    if (!(sigma_scale > 0.0)) throw Error(ErrorCode::InvalidConfig, "sigma_scale must be positive");
  }
};

namespace detail {

inline int round_up(int v, int m) { return (v + m - 1) / m * m; }

/// Window start offsets along one axis of length `dim` (dim >= patch).
inline std::vector<int> window_starts(int dim, int patch, double overlap) {
  if (dim <= patch) return {0};
  const double stride = patch * (1.0 - overlap);
  const int steps = static_cast<int>(std::ceil((dim - patch) / stride)) + 1;
  const double actual = static_cast<double>(dim - patch) / (steps - 1);
  std::vector<int> out;
  for (int i = 0; i < steps; ++i) out.push_back(static_cast<int>(std::lround(actual * i)));
  return out;
}

/// Separable Gaussian centred in the patch, peak 1, zeros lifted to the
/// smallest positive weight so every voxel keeps a nonzero weight.
inline Grid<float> importance_map(const Shape3& patch, double sigma_scale, bool gaussian) {
  Grid<float> w(patch, 1.0f);
  if (!gaussian) return w;
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const int n = patch[a];
    const double c = (n - 1) / 2.0, s = n * sigma_scale;
    for (int i = 0; i < n; ++i) axis[a].push_back(std::exp(-0.5 * (i - c) * (i - c) / (s * s)));
  }
  float min_pos = 1.0f;
  for (int z = 0; z < patch.nz; ++z)
    for (int y = 0; y < patch.ny; ++y)
      for (int x = 0; x < patch.nx; ++x) {
        const float v = static_cast<float>(axis[0][x] * axis[1][y] * axis[2][z]);
        w(x, y, z) = v;
        if (v > 0.0f) min_pos = std::min(min_pos, v);
      }
  for (float& v : w) v = std::max(v, min_pos);
  return w;
}

inline nn::Tensor crop_window(const nn::Tensor& t, std::array<int, 3> o, const Shape3& s) {
  nn::Tensor out(t.channels(), s, 0.0f);
  for (int c = 0; c < t.channels(); ++c)
    for (int z = 0; z < s.nz; ++z)
      for (int y = 0; y < s.ny; ++y)
        for (int x = 0; x < s.nx; ++x) out.at(c, x, y, z) = t.at(c, x + o[0], y + o[1], z + o[2]);
  return out;
}

inline nn::Tensor pad_to(const nn::Tensor& t, const Shape3& s) {
  if (t.shape() == s) return t;
  nn::Tensor out(t.channels(), s, 0.0f);
  const Shape3& in = t.shape();
  for (int c = 0; c < t.channels(); ++c)
    for (int z = 0; z < in.nz; ++z)
      for (int y = 0; y < in.ny; ++y)
        for (int x = 0; x < in.nx; ++x) out.at(c, x, y, z) = t.at(c, x, y, z);
  return out;
}

}  // namespace detail

/// Sliding-window inference with importance-weighted blending. The volume is
/// zero-padded to at least one patch (and to `divisor` multiples), windows
/// are blended, and the result is cropped back to the input shape.
template <Predictor P>
LogitsVolume predict_logits(const P& model, const MultiModalVolume& vol, const SlidingWindowConfig& cfg,
                            int divisor = 1, std::string source_model = {}) {
  cfg.validate();
  const Shape3 in_shape = vol.shape();
  Shape3 patch = cfg.patch;
  for (int a = 0; a < 3; ++a) patch[a] = detail::round_up(std::min(patch[a], detail::round_up(in_shape[a], divisor)), divisor);
  if (patch.voxels() > cfg.max_patch_voxels)
    throw Error(ErrorCode::OOMShape, "patch " + patch.str() + " exceeds the memory budget of " +
                                         std::to_string(cfg.max_patch_voxels) + " voxels; use a smaller patch");
  Shape3 padded;
  for (int a = 0; a < 3; ++a) padded[a] = std::max(in_shape[a], patch[a]);
  const nn::Tensor input = detail::pad_to(vol.data, padded);

  const Grid<float> weight = detail::importance_map(patch, cfg.sigma_scale, cfg.gaussian);
  std::vector<double> acc(static_cast<std::size_t>(kRegions) * padded.voxels(), 0.0);
  std::vector<double> wsum(padded.voxels(), 0.0);

  for (int oz : detail::window_starts(padded.nz, patch.nz, cfg.overlap))
    for (int oy : detail::window_starts(padded.ny, patch.ny, cfg.overlap))
      for (int ox : detail::window_starts(padded.nx, patch.nx, cfg.overlap)) {
        const nn::Tensor out = model.forward(detail::crop_window(input, {ox, oy, oz}, patch));
        if (out.channels() != kRegions || !(out.shape() == patch))
          throw Error(ErrorCode::ShapeMismatch, "predictor returned " + std::to_string(out.channels()) + "x" +
                                                    out.shape().str() + " for patch " + patch.str());
        for (int z = 0; z < patch.nz; ++z)
          for (int y = 0; y < patch.ny; ++y)
            for (int x = 0; x < patch.nx; ++x) {
              const std::size_t gi = padded.index(x + ox, y + oy, z + oz);
              const double w = weight(x, y, z);
              wsum[gi] += w;
              for (int c = 0; c < kRegions; ++c)
                acc[static_cast<std::size_t>(c) * padded.voxels() + gi] += w * out.at(c, x, y, z);
            }
      }

  LogitsVolume lv;
  lv.data = nn::Tensor(kRegions, in_shape, 0.0f);
  for (int c = 0; c < kRegions; ++c)
    for (int z = 0; z < in_shape.nz; ++z)
      for (int y = 0; y < in_shape.ny; ++y)
        for (int x = 0; x < in_shape.nx; ++x) {
          const std::size_t gi = padded.index(x, y, z);
          lv.data.at(c, x, y, z) = static_cast<float>(acc[static_cast<std::size_t>(c) * padded.voxels() + gi] / wsum[gi]);
        }
  lv.source_model = std::move(source_model);
  lv.case_id = vol.case_id;
  lv.spacing = vol.spacing;
  lv.affine = vol.affine;
  lv.validate();
  return lv;
}

inline LogitsVolume predict_logits(const ModelHandle& m, const MultiModalVolume& vol, const SlidingWindowConfig& cfg) {
  if (m.trained_steps == 0)
    log_warning("untrained_model", {{"model", m.name}, {"case_id", vol.case_id},
                                    {"message", "checkpoint has zero optimizer steps; predictions are from random weights"}});
  return predict_logits(m, vol, cfg, m.divisor(), m.name);
}

/// Sums member logits per region channel; a voxel is on iff the sum exceeds
/// `threshold`.
inline RegionMaskSet fuse_group(std::span<const LogitsVolume> logits, double threshold = 0.0) {
  if (logits.empty()) throw Error(ErrorCode::EmptyGroup, "fuse_group needs at least one member");
  const LogitsVolume& first = logits.front();
  for (const auto& l : logits) {
    if (l.data.channels() != kRegions || !(l.shape() == first.shape()))
      throw Error(ErrorCode::ShapeMismatch, "group members disagree in shape: " + first.shape().str() + " vs " +
                                                l.shape().str());
    if (l.case_id != first.case_id)
      throw Error(ErrorCode::CaseMismatch, "group mixes cases '" + first.case_id + "' and '" + l.case_id + "'");
  }
  RegionMaskSet out(first.shape(), first.spacing);
  out.affine = first.affine;
  const std::size_t n = first.shape().voxels();
  for (int c = 0; c < kRegions; ++c) {
    Mask& m = out.region(c);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (const auto& l : logits) sum += l.data.channel(c)[i];
      m[i] = sum > threshold ? 1 : 0;
    }
  }
  return out;
}

enum class TieBreak { Positive, Negative };

inline TieBreak tie_break_from_string(const std::string& s) {
  if (s == "positive") return TieBreak::Positive;
  if (s == "negative") return TieBreak::Negative;
  throw Error(ErrorCode::InvalidConfig, "tie_break must be 'positive' or 'negative', got '" + s + "'");
}

inline const char* to_string(TieBreak t) { return t == TieBreak::Positive ? "positive" : "negative"; }

/// Per voxel and region: on iff more than half the groups vote on; an exact
/// half goes to `tie`.
inline RegionMaskSet majority_vote(std::span<const RegionMaskSet> groups, TieBreak tie = TieBreak::Positive) {
  if (groups.empty()) throw Error(ErrorCode::EmptyGroup, "majority_vote needs at least one group");
  const RegionMaskSet& first = groups.front();
  for (const auto& g : groups) {
    g.check_shapes();
    if (!(g.wt.shape() == first.wt.shape()))
      throw Error(ErrorCode::ShapeMismatch, "group masks disagree in shape: " + first.wt.shape().str() + " vs " +
                                                g.wt.shape().str());
  }
  const std::size_t n_groups = groups.size();
  RegionMaskSet out(first.wt.shape(), first.spacing);
  out.affine = first.affine;
  for (int c = 0; c < kRegions; ++c) {
    Mask& m = out.region(c);
    for (std::size_t i = 0; i < m.size(); ++i) {
      std::size_t votes = 0;
      for (const auto& g : groups) votes += g.region(c)[i] != 0;
      if (2 * votes > n_groups) m[i] = 1;
      else if (2 * votes == n_groups) m[i] = tie == TieBreak::Positive ? 1 : 0;
      else m[i] = 0;
    }
  }
  return out;
}

struct EnsembleConfig {
  std::vector<std::vector<std::filesystem::path>> groups;
  double threshold = 0.0;
  std::string threshold_space = "logit";  // or "probability"
  TieBreak tie_break = TieBreak::Positive;

  void validate() const {
    if (groups.empty()) throw Error(ErrorCode::EmptyGroup, "ensemble has no groups");
    for (std::size_t g = 0; g < groups.size(); ++g)
      if (groups[g].empty()) throw Error(ErrorCode::EmptyGroup, "ensemble group " + std::to_string(g) + " is empty");
    if (threshold_space != "logit" && threshold_space != "probability")
      throw Error(ErrorCode::InvalidConfig, "threshold_space must be 'logit' or 'probability'");
    if (threshold_space == "probability" && !(threshold > 0.0 && threshold < 1.0))
      throw Error(ErrorCode::InvalidConfig, "probability threshold must lie in (0, 1)");
  }

  /// Threshold applied to summed logits. A probability threshold t maps to
  /// log(t / (1 - t)).
  double logit_threshold() const {
    return threshold_space == "probability" ? std::log(threshold / (1.0 - threshold)) : threshold;
  }

  /// One group per model: threshold every model on its own, then vote.
  static EnsembleConfig one_model_per_group(const std::vector<std::filesystem::path>& ckpts) {
    EnsembleConfig c;
    for (const auto& p : ckpts) c.groups.push_back({p});
    return c;
  }
};

/// Membership file: {"groups": [[ckpt, ...], ...], "threshold": 0,
/// "threshold_space": "logit", "tie_break": "positive"}. Relative paths
/// resolve against `base_dir`.
inline EnsembleConfig ensemble_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "ensemble config must be an object");
  for (const auto& [k, v] : j.items())
    if (k != "groups" && k != "threshold" && k != "threshold_space" && k != "tie_break")
      throw Error(ErrorCode::InvalidConfig, "unknown ensemble key '" + k + "'");
  EnsembleConfig c;
  if (!j.contains("groups") || !j["groups"].is_array())
    throw Error(ErrorCode::InvalidConfig, "ensemble config needs a 'groups' array");
  for (const auto& g : j["groups"]) {
    std::vector<std::filesystem::path> members;
    if (g.is_string()) {
      members.push_back(g.get<std::string>());
    } else if (g.is_array()) {
      for (const auto& m : g) {
        if (!m.is_string()) throw Error(ErrorCode::InvalidConfig, "group members must be checkpoint paths");
        members.push_back(m.get<std::string>());
      }
    } else {
      throw Error(ErrorCode::InvalidConfig, "each group must be a list of checkpoint paths");
    }
    for (auto& p : members)
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    c.groups.push_back(std::move(members));
  }
  if (j.contains("threshold")) c.threshold = j["threshold"].get<double>();
  if (j.contains("threshold_space")) c.threshold_space = j["threshold_space"].get<std::string>();
  if (j.contains("tie_break")) c.tie_break = tie_break_from_string(j["tie_break"].get<std::string>());
  c.validate();
  return c;
}

inline nlohmann::ordered_json to_json(const EnsembleConfig& c) {
  nlohmann::ordered_json groups = nlohmann::ordered_json::array();
  for (const auto& g : c.groups) {
    nlohmann::ordered_json members = nlohmann::ordered_json::array();
    for (const auto& p : g) members.push_back(p.generic_string());
    groups.push_back(members);
  }
  return {{"groups", groups},
          {"threshold", c.threshold},
          {"threshold_space", c.threshold_space},
          {"tie_break", to_string(c.tie_break)}};
}

/// Fuses each group of logits, then votes across groups.
inline RegionMaskSet ensemble_from_logits(const std::vector<std::vector<LogitsVolume>>& groups, double threshold,
                                          TieBreak tie) {
  if (groups.empty()) throw Error(ErrorCode::EmptyGroup, "ensemble has no groups");
  if (groups.size() % 2 == 0)
    log_warning("even_group_count", {{"groups", groups.size()}, {"tie_break", to_string(tie)}});
  std::vector<RegionMaskSet> fused;
  fused.reserve(groups.size());
  for (const auto& g : groups) fused.push_back(fuse_group(g, threshold));
  return majority_vote(fused, tie);
}

/// Same pipeline over in-memory predictors; groups hold pointers.
template <Predictor P>
RegionMaskSet ensemble_predict(const std::vector<std::vector<const P*>>& groups, const MultiModalVolume& vol,
                               const SlidingWindowConfig& window, double threshold = 0.0,
                               TieBreak tie = TieBreak::Positive, int divisor = 1) {
  std::map<const P*, LogitsVolume> cache;
  std::vector<std::vector<LogitsVolume>> logits;
  for (const auto& g : groups) {
    if (g.empty()) throw Error(ErrorCode::EmptyGroup, "ensemble group is empty");
    std::vector<LogitsVolume> lg;
    for (const P* p : g) {
      auto it = cache.find(p);
      if (it == cache.end()) it = cache.emplace(p, predict_logits(*p, vol, window, divisor)).first;
      lg.push_back(it->second);
    }
    logits.push_back(std::move(lg));
  }
  return ensemble_from_logits(logits, threshold, tie);
}

/// Loads every distinct checkpoint once, predicts, fuses and votes.
inline RegionMaskSet ensemble_predict(const EnsembleConfig& cfg, const MultiModalVolume& vol,
                                      const SlidingWindowConfig& window) {
  cfg.validate();
  std::map<std::string, LogitsVolume> cache;
  std::vector<std::vector<LogitsVolume>> logits;
  for (const auto& g : cfg.groups) {
    std::vector<LogitsVolume> lg;
    for (const auto& path : g) {
      const std::string key = path.lexically_normal().generic_string();
      auto it = cache.find(key);
      if (it == cache.end()) it = cache.emplace(key, predict_logits(load_model(path), vol, window)).first;
      lg.push_back(it->second);
    }
    logits.push_back(std::move(lg));
  }
  return ensemble_from_logits(logits, cfg.logit_threshold(), cfg.tie_break);
}

}  // namespace pedseg
