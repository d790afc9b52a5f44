#pragma once

#include <array>
#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "pedseg/error.hpp"
#include "pedseg/morphology.hpp"
#include "pedseg/volume_io.hpp"

namespace pedseg::post {

enum class Smoothing { None, ClosingThenOpening };

struct PostprocConfig {
  std::array<double, kRegions> min_component_size{50, 50, 50};  // ET, TC, WT
  bool size_in_mm3 = false;
  morph::Connectivity connectivity = morph::Connectivity::TwentySix;
  Smoothing smoothing = Smoothing::ClosingThenOpening;
  int radius = 1;
  bool enforce_hierarchy = true;

  void validate() const {
    for (double v : min_component_size)
      if (!(v >= 0.0)) throw Error(ErrorCode::InvalidConfig, "min_component_size must be >= 0");
    if (smoothing != Smoothing::None && radius < 1)
      throw Error(ErrorCode::InvalidConfig, "smoothing radius must be >= 1");
  }

  /// Minimum component size in voxels for `region` at the given spacing.
  std::size_t min_voxels(int region, const Spacing& spacing) const {
    const double v = min_component_size[region];
    if (!size_in_mm3) return static_cast<std::size_t>(std::ceil(v));
    const double voxel_mm3 = spacing[0] * spacing[1] * spacing[2];
    return static_cast<std::size_t>(std::ceil(v / voxel_mm3 - 1e-9));
  }
};

inline PostprocConfig postproc_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> allowed{"min_component_size", "size_in_mm3", "connectivity", "smoothing",
                                             "radius", "enforce_hierarchy"};
  for (const auto& [k, v] : j.items())
    if (!allowed.contains(k)) throw Error(ErrorCode::InvalidConfig, "unknown postprocess key '" + k + "'");
  PostprocConfig c;
  if (j.contains("min_component_size")) {
    const auto& m = j.at("min_component_size");
    if (m.is_number()) c.min_component_size.fill(m.get<double>());
    else c.min_component_size = m.get<std::array<double, kRegions>>();
  }
  c.size_in_mm3 = j.value("size_in_mm3", c.size_in_mm3);
  c.connectivity = morph::connectivity_from_int(j.value("connectivity", 26));
  const auto sm = j.value("smoothing", std::string("closing_then_opening"));
  if (sm == "none") c.smoothing = Smoothing::None;
  else if (sm == "closing_then_opening") c.smoothing = Smoothing::ClosingThenOpening;
  else throw Error(ErrorCode::InvalidConfig, "unknown smoothing '" + sm + "'");
  c.radius = j.value("radius", c.radius);
  c.enforce_hierarchy = j.value("enforce_hierarchy", c.enforce_hierarchy);
  c.validate();
  return c;
}

/// Removes connected components smaller than `min_voxels`.
inline Mask size_filter(const Mask& mask, std::size_t min_voxels, morph::Connectivity conn) {
  if (min_voxels == 0) return mask;
  const auto comps = morph::label_components(mask, conn);
  Mask out(mask.shape(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto id = comps.labels[i];
    out[i] = id > 0 && comps.sizes[id - 1] >= min_voxels;
  }
  return out;
}

/// Closing followed by opening with the radius-r cube element. The pair is
/// idempotent.
inline Mask smooth_boundaries(const Mask& mask, int radius) {
  return morph::open(morph::close(mask, radius), radius);
}

/// Upward closure: WT := WT ∪ TC ∪ ET, TC := TC ∪ ET. Never removes voxels.
inline RegionMaskSet enforce_hierarchy(const RegionMaskSet& raw) {
  raw.check_shapes();
  RegionMaskSet out = raw;
  for (std::size_t i = 0; i < out.wt.size(); ++i) {
    out.tc[i] = (out.tc[i] || out.et[i]) ? 1 : 0;
    out.wt[i] = (out.wt[i] || out.tc[i]) ? 1 : 0;
    out.et[i] = out.et[i] ? 1 : 0;
  }
  return out;
}

/// Size filter then smoothing, repeated until nothing changes. Both steps are
/// increasing, and after the first pass every iterate is contained in the
/// previous one, so the loop terminates at a fixed point.
inline Mask filter_and_smooth(const Mask& mask, std::size_t min_voxels, const PostprocConfig& cfg) {
  auto once = [&](const Mask& m) {
    Mask f = size_filter(m, min_voxels, cfg.connectivity);
    return cfg.smoothing == Smoothing::None ? f : smooth_boundaries(f, cfg.radius);
  };
  Mask cur = once(mask);
  if (cfg.smoothing == Smoothing::None) return cur;
  for (;;) {
    Mask next = once(cur);
    if (next == cur) return cur;
    cur = std::move(next);
  }
}

/// Per-region size filtering and smoothing followed by hierarchy repair. The
/// closure is also applied up front: the per-region steps are increasing, so
/// nested input stays nested and the pipeline is idempotent.
inline RegionMaskSet postprocess_case(const RegionMaskSet& raw, const PostprocConfig& cfg) {
  cfg.validate();
  RegionMaskSet cur = cfg.enforce_hierarchy ? enforce_hierarchy(raw) : raw;
  for (int r = 0; r < kRegions; ++r)
    cur.region(r) = filter_and_smooth(cur.region(r), cfg.min_voxels(r, raw.spacing), cfg);
  return cfg.enforce_hierarchy ? enforce_hierarchy(cur) : cur;
}

}  // namespace pedseg::post
