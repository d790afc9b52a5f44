#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "pedseg/error.hpp"
#include "pedseg/morphology.hpp"
#include "pedseg/volume_io.hpp"

namespace pedseg::metrics {

/// Distance assigned to unmatched lesions and to empty-vs-nonempty HD95.
inline constexpr double kHausdorffPenalty = 374.0;

struct MetricsConfig {
  morph::Connectivity connectivity = morph::Connectivity::TwentySix;
  int dilation_radius = 1;
  double penalty = kHausdorffPenalty;
};

inline MetricsConfig metrics_config_from_json(const nlohmann::json& j) {
  for (const auto& [k, v] : j.items())
    if (k != "connectivity" && k != "dilation_radius" && k != "penalty")
      throw Error(ErrorCode::InvalidConfig, "unknown metrics key '" + k + "'");
  MetricsConfig c;
  c.connectivity = morph::connectivity_from_int(j.value("connectivity", 26));
  c.dilation_radius = j.value("dilation_radius", 1);
  c.penalty = j.value("penalty", kHausdorffPenalty);
  if (c.dilation_radius < 0) throw Error(ErrorCode::InvalidConfig, "dilation_radius must be >= 0");
  return c;
}

/// Plain Dice without smoothing: both empty -> 1, exactly one empty -> 0.
inline double dice_score(const Mask& pred, const Mask& gt) {
  require_same_shape(pred, gt, "dice_score");
  std::size_t p = 0, g = 0, inter = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    p += a;
    g += b;
    inter += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

/// Linear-interpolated percentile (q in [0, 100]) of an unsorted sample.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCode::EmptyMask, "percentile of empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

/// Surface-to-surface nearest distances in both directions, pooled.
inline std::vector<double> surface_distances(const Mask& a, const Mask& b, const Spacing& spacing) {
  const Mask sa = morph::surface(a), sb = morph::surface(b);
  const auto da = morph::squared_distance_transform(sa, spacing);
  const auto db = morph::squared_distance_transform(sb, spacing);
  std::vector<double> out;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa[i]) out.push_back(std::sqrt(db[i]));
    if (sb[i]) out.push_back(std::sqrt(da[i]));
  }
  return out;
}

/// 95th percentile of the pooled symmetric surface distances (mm).
inline double hd95(const Mask& pred, const Mask& gt, const Spacing& spacing) {
  require_same_shape(pred, gt, "hd95");
  if (count_on(pred) == 0 || count_on(gt) == 0) throw Error(ErrorCode::EmptyMask, "hd95 needs two nonempty masks");
  return percentile(surface_distances(pred, gt, spacing), 95.0);
}

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline Confusion confusion(const Mask& pred, const Mask& gt) {
  require_same_shape(pred, gt, "confusion");
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// (sensitivity, specificity); an empty denominator scores 1.
inline std::pair<double, double> sensitivity_specificity(const Mask& pred, const Mask& gt) {
  const Confusion c = confusion(pred, gt);
  const double sens = c.tp + c.fn == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  const double spec = c.tn + c.fp == 0 ? 1.0 : static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  return {sens, spec};
}

using VoxelSet = std::vector<std::size_t>;  // sorted linear indices

struct LesionPair {
  int gt = 0;
  std::vector<int> preds;
};

struct LesionMatching {
  Shape3 shape;
  std::vector<VoxelSet> gt_components;
  std::vector<VoxelSet> pred_components;
  std::vector<LesionPair> pairs;
  std::vector<int> fp_components;  // indices into pred_components
  std::vector<int> fn_components;  // indices into gt_components
};

namespace detail {

inline std::vector<VoxelSet> component_sets(const morph::Components& c) {
  std::vector<VoxelSet> out(c.count());
  for (std::size_t i = 0; i < c.labels.size(); ++i)
    if (c.labels[i] > 0) out[c.labels[i] - 1].push_back(i);
  return out;
}

inline std::size_t intersection_size(const VoxelSet& a, const VoxelSet& b) {
  std::size_t n = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) ++i;
    else if (*j < *i) ++j;
    else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

// Masks restricted to the bounding box (grown by one voxel) of both sets;
// distances inside the box equal distances in the full grid.
inline std::pair<Mask, Mask> cropped_masks(const VoxelSet& a, const VoxelSet& b, const Shape3& s) {
  std::array<int, 3> lo{s.nx, s.ny, s.nz}, hi{-1, -1, -1};
  auto grow = [&](const VoxelSet& v) {
    for (auto i : v) {
      const std::array<int, 3> p{static_cast<int>(i % s.nx), static_cast<int>((i / s.nx) % s.ny),
                                 static_cast<int>(i / (static_cast<std::size_t>(s.nx) * s.ny))};
      for (int k = 0; k < 3; ++k) {
        lo[k] = std::min(lo[k], p[k]);
        hi[k] = std::max(hi[k], p[k]);
      }
    }
  };
  grow(a);
  grow(b);
  for (int k = 0; k < 3; ++k) {
    lo[k] = std::max(0, lo[k] - 1);
    hi[k] = std::min(s[k] - 1, hi[k] + 1);
  }
  const Shape3 cs{hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
  Mask ma(cs, 0), mb(cs, 0);
  auto fill = [&](const VoxelSet& v, Mask& m) {
    for (auto i : v) {
      const int x = static_cast<int>(i % s.nx), y = static_cast<int>((i / s.nx) % s.ny);
      const int z = static_cast<int>(i / (static_cast<std::size_t>(s.nx) * s.ny));
      m(x - lo[0], y - lo[1], z - lo[2]) = 1;
    }
  };
  fill(a, ma);
  fill(b, mb);
  return {std::move(ma), std::move(mb)};
}

inline VoxelSet merged_preds(const LesionMatching& m, const LesionPair& p) {
  VoxelSet out;
  for (int k : p.preds) out.insert(out.end(), m.pred_components[k].begin(), m.pred_components[k].end());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Associates predicted components with ground-truth lesions. A prediction
/// belongs to the lesion whose dilated footprint it overlaps most (lowest
/// lesion index on ties); several predictions may share one lesion.
inline LesionMatching match_lesions(const Mask& pred, const Mask& gt, morph::Connectivity conn, int dilation_radius) {
  require_same_shape(pred, gt, "match_lesions");
  const Shape3 s = gt.shape();
  LesionMatching m;
  m.shape = s;
  const auto gc = morph::label_components(gt, conn);
  const auto pc = morph::label_components(pred, conn);
  m.gt_components = detail::component_sets(gc);
  m.pred_components = detail::component_sets(pc);

  // overlap[pred][gt] = voxels of pred inside the dilated gt lesion.
  std::vector<std::map<int, std::size_t>> overlap(m.pred_components.size());
  for (std::size_t g = 0; g < m.gt_components.size(); ++g) {
    const auto& comp = m.gt_components[g];
    std::array<int, 3> lo{s.nx, s.ny, s.nz}, hi{-1, -1, -1};
    for (auto i : comp) {
      const std::array<int, 3> p{static_cast<int>(i % s.nx), static_cast<int>((i / s.nx) % s.ny),
                                 static_cast<int>(i / (static_cast<std::size_t>(s.nx) * s.ny))};
      for (int k = 0; k < 3; ++k) {
        lo[k] = std::min(lo[k], p[k]);
        hi[k] = std::max(hi[k], p[k]);
      }
    }
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::max(0, lo[k] - dilation_radius);
      hi[k] = std::min(s[k] - 1, hi[k] + dilation_radius);
    }
    const Shape3 bs{hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
    Mask box(bs, 0);
    for (auto i : comp) {
      const int x = static_cast<int>(i % s.nx), y = static_cast<int>((i / s.nx) % s.ny);
      const int z = static_cast<int>(i / (static_cast<std::size_t>(s.nx) * s.ny));
      box(x - lo[0], y - lo[1], z - lo[2]) = 1;
    }
    const Mask dil = dilation_radius > 0 ? morph::dilate(box, dilation_radius) : box;
    for (int z = 0; z < bs.nz; ++z)
      for (int y = 0; y < bs.ny; ++y)
        for (int x = 0; x < bs.nx; ++x) {
          if (!dil(x, y, z)) continue;
          const auto id = pc.labels(x + lo[0], y + lo[1], z + lo[2]);
          if (id > 0) ++overlap[id - 1][static_cast<int>(g)];
        }
  }

  std::vector<std::vector<int>> preds_of_gt(m.gt_components.size());
  for (std::size_t p = 0; p < overlap.size(); ++p) {
    if (overlap[p].empty()) {
      m.fp_components.push_back(static_cast<int>(p));
      continue;
    }
    int best = -1;
    std::size_t best_n = 0;
    for (const auto& [g, n] : overlap[p])
      if (n > best_n) {
        best = g;
        best_n = n;
      }
    preds_of_gt[best].push_back(static_cast<int>(p));
  }
  for (std::size_t g = 0; g < preds_of_gt.size(); ++g) {
    if (preds_of_gt[g].empty()) m.fn_components.push_back(static_cast<int>(g));
    else m.pairs.push_back({static_cast<int>(g), preds_of_gt[g]});
  }
  return m;
}

inline double pair_dice(const LesionMatching& m, const LesionPair& p) {
  const VoxelSet pred = detail::merged_preds(m, p);
  const VoxelSet& gt = m.gt_components[p.gt];
  return 2.0 * static_cast<double>(detail::intersection_size(pred, gt)) / static_cast<double>(pred.size() + gt.size());
}

inline double pair_hd95(const LesionMatching& m, const LesionPair& p, const Spacing& spacing) {
  const VoxelSet pred = detail::merged_preds(m, p);
  auto [mp, mg] = detail::cropped_masks(pred, m.gt_components[p.gt], m.shape);
  return hd95(mp, mg, spacing);
}

/// Mean of matched-pair Dice with a 0 for every false positive and false
/// negative lesion; 1 when neither side has lesions.
inline double lesion_wise_dice(const LesionMatching& m) {
  const std::size_t n = m.pairs.size() + m.fp_components.size() + m.fn_components.size();
  if (n == 0) return 1.0;
  double sum = 0.0;
  for (const auto& p : m.pairs) sum += pair_dice(m, p);
  return sum / static_cast<double>(n);
}

/// Mean of matched-pair HD95 with `penalty` for every unmatched lesion; 0
/// when neither side has lesions.
inline double lesion_wise_hd95(const LesionMatching& m, const Spacing& spacing, double penalty = kHausdorffPenalty) {
  const std::size_t n = m.pairs.size() + m.fp_components.size() + m.fn_components.size();
  if (n == 0) return 0.0;
  double sum = penalty * static_cast<double>(m.fp_components.size() + m.fn_components.size());
  for (const auto& p : m.pairs) sum += pair_hd95(m, p, spacing);
  return sum / static_cast<double>(n);
}

struct RegionScores {
  double lw_dice = 0, dice = 0, lw_hd95 = 0, hd95 = 0, sensitivity = 0, specificity = 0;
  std::size_t matched = 0, fp = 0, fn = 0;
};

struct CaseReport {
  std::string case_id;
  std::array<RegionScores, kRegions> regions;
};

inline RegionScores evaluate_region(const Mask& pred, const Mask& gt, const Spacing& spacing, const MetricsConfig& cfg) {
  RegionScores r;
  const auto m = match_lesions(pred, gt, cfg.connectivity, cfg.dilation_radius);
  r.lw_dice = lesion_wise_dice(m);
  r.lw_hd95 = lesion_wise_hd95(m, spacing, cfg.penalty);
  r.matched = m.pairs.size();
  r.fp = m.fp_components.size();
  r.fn = m.fn_components.size();
  r.dice = dice_score(pred, gt);
  const bool pe = count_on(pred) == 0, ge = count_on(gt) == 0;
  r.hd95 = pe && ge ? 0.0 : (pe || ge ? cfg.penalty : hd95(pred, gt, spacing));
  std::tie(r.sensitivity, r.specificity) = sensitivity_specificity(pred, gt);
  return r;
}

inline CaseReport evaluate_case(const RegionMaskSet& pred, const RegionMaskSet& gt, const std::string& case_id,
                                const MetricsConfig& cfg = {}) {
  pred.check_shapes();
  gt.check_shapes();
  require_same_shape(pred.wt, gt.wt, "evaluate_case");
  CaseReport rep;
  rep.case_id = case_id;
  for (int r = 0; r < kRegions; ++r) rep.regions[r] = evaluate_region(pred.region(r), gt.region(r), gt.spacing, cfg);
  return rep;
}

struct CohortReport {
  std::vector<CaseReport> cases;
  std::array<RegionScores, kRegions> mean;
};

inline CohortReport aggregate(std::vector<CaseReport> cases) {
  if (cases.empty()) throw Error(ErrorCode::EmptyCohort, "no cases to aggregate");
  CohortReport out;
  for (int r = 0; r < kRegions; ++r) {
    RegionScores& m = out.mean[r];
    for (const auto& c : cases) {
      const auto& s = c.regions[r];
      m.lw_dice += s.lw_dice;
      m.dice += s.dice;
      m.lw_hd95 += s.lw_hd95;
      m.hd95 += s.hd95;
      m.sensitivity += s.sensitivity;
      m.specificity += s.specificity;
      m.matched += s.matched;
      m.fp += s.fp;
      m.fn += s.fn;
    }
    const double n = static_cast<double>(cases.size());
    m.lw_dice /= n;
    m.dice /= n;
    m.lw_hd95 /= n;
    m.hd95 /= n;
    m.sensitivity /= n;
    m.specificity /= n;
  }
  out.cases = std::move(cases);
  return out;
}

struct CohortCase {
  std::string case_id;
  RegionMaskSet pred;
  RegionMaskSet gt;
};

inline CohortReport evaluate_cohort(const std::vector<CohortCase>& cases, const MetricsConfig& cfg = {}) {
  if (cases.empty()) throw Error(ErrorCode::EmptyCohort, "cohort has no cases");
  std::vector<CaseReport> reports;
  for (const auto& c : cases) reports.push_back(evaluate_case(c.pred, c.gt, c.case_id, cfg));
  return aggregate(std::move(reports));
}

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// CSV: case_id,region,lw_dice,dice,lw_hd95,hd95,sensitivity,specificity
inline void write_csv(const CohortReport& rep, std::ostream& out) {
  out << "case_id,region,lw_dice,dice,lw_hd95,hd95,sensitivity,specificity\n";
  for (const auto& c : rep.cases)
    for (int r = 0; r < kRegions; ++r) {
      const auto& s = c.regions[r];
      out << c.case_id << ',' << kRegionNames[r] << ',' << format_number(s.lw_dice) << ','
          << format_number(s.dice) << ',' << format_number(s.lw_hd95) << ',' << format_number(s.hd95) << ','
          << format_number(s.sensitivity) << ',' << format_number(s.specificity) << '\n';
    }
}

inline nlohmann::ordered_json scores_json(const RegionScores& s) {
  // Round through the CSV formatting so both reports agree digit for digit.
  auto num = [](double v) { return std::stod(format_number(v)); };
  return {{"lw_dice", num(s.lw_dice)},          {"dice", num(s.dice)},
          {"lw_hd95", num(s.lw_hd95)},          {"hd95", num(s.hd95)},
          {"sensitivity", num(s.sensitivity)},  {"specificity", num(s.specificity)},
          {"lesions", {{"matched", s.matched}, {"fp", s.fp}, {"fn", s.fn}}}};
}

/// Aggregate layout: one row per region with the four headline columns plus
/// sensitivity and specificity, followed by the per-case breakdown.
inline nlohmann::ordered_json to_json(const CohortReport& rep) {
  nlohmann::ordered_json j;
  j["num_cases"] = rep.cases.size();
  nlohmann::ordered_json agg = nlohmann::ordered_json::object();
  for (int r = 0; r < kRegions; ++r) agg[kRegionNames[r]] = scores_json(rep.mean[r]);
  j["aggregate"] = agg;
  nlohmann::ordered_json cases = nlohmann::ordered_json::array();
  for (const auto& c : rep.cases) {
    nlohmann::ordered_json cj;
    cj["case_id"] = c.case_id;
    for (int r = 0; r < kRegions; ++r) cj[kRegionNames[r]] = scores_json(c.regions[r]);
    cases.push_back(cj);
  }
  j["cases"] = cases;
  return j;
}

}  // namespace pedseg::metrics
