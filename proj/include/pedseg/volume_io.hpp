#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <cctype>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pedseg/error.hpp"
#include "pedseg/grid.hpp"
#include "pedseg/nifti.hpp"

namespace pedseg {

enum class Modality { T1 = 0, T1Gd = 1, T2 = 2, Flair = 3 };
inline constexpr int kModalities = 4;
inline constexpr std::array<const char*, kModalities> kModalityNames = {"t1", "t1gd", "t2", "flair"};

enum class Region { ET = 0, TC = 1, WT = 2 };
inline constexpr int kRegions = 3;
inline constexpr std::array<const char*, kRegions> kRegionNames = {"ET", "TC", "WT"};

/// Four co-registered MRI channels in fixed order T1, T1Gd, T2, FLAIR.
struct MultiModalVolume {
  MultiGrid<float> data;
  Spacing spacing{1.0, 1.0, 1.0};
  Affine affine = identity_affine();
  std::string case_id;

  const Shape3& shape() const noexcept { return data.shape(); }

  void validate() const {
    if (data.channels() != kModalities)
      throw Error(ErrorCode::ShapeMismatch, "volume must have 4 channels, got " + std::to_string(data.channels()));
    for (double s : spacing)
      if (!(s > 0.0)) throw Error(ErrorCode::HeaderMismatch, "spacing must be strictly positive");
  }
};

struct LabelMap {
  Grid<std::int32_t> data;
  std::set<std::int32_t> label_vocabulary{0};
  std::string case_id;
  Spacing spacing{1.0, 1.0, 1.0};
  Affine affine = identity_affine();

  void validate() const {
    for (auto v : data)
      if (!label_vocabulary.contains(v))
        throw Error(ErrorCode::UnknownLabel, "label " + std::to_string(v) + " not in vocabulary (case '" + case_id + "')");
  }
};

/// The three overlapping evaluation regions. Nesting ET ⊆ TC ⊆ WT holds
/// for post-processed masks but not necessarily for raw model output.
struct RegionMaskSet {
  Mask et, tc, wt;
  Spacing spacing{1.0, 1.0, 1.0};
  Affine affine = identity_affine();

  explicit RegionMaskSet(Shape3 shape = {}, Spacing sp = {1.0, 1.0, 1.0})
      : et(shape), tc(shape), wt(shape), spacing(sp), affine(identity_affine(sp)) {}

  const Shape3& shape() const noexcept { return wt.shape(); }

  Mask& region(Region r) noexcept { return r == Region::ET ? et : (r == Region::TC ? tc : wt); }
  const Mask& region(Region r) const noexcept { return r == Region::ET ? et : (r == Region::TC ? tc : wt); }
  Mask& region(int r) noexcept { return region(static_cast<Region>(r)); }
  const Mask& region(int r) const noexcept { return region(static_cast<Region>(r)); }

  void check_shapes() const {
    require_same_shape(et, tc, "ET vs TC mask");
    require_same_shape(tc, wt, "TC vs WT mask");
  }

  bool is_nested() const {
    check_shapes();
    for (std::size_t i = 0; i < wt.size(); ++i) {
      if (et[i] && !tc[i]) return false;
      if (tc[i] && !wt[i]) return false;
    }
    return true;
  }

  bool same_masks(const RegionMaskSet& o) const { return et == o.et && tc == o.tc && wt == o.wt; }
};

/// Raw annotation labels composing each region. Supplied by configuration;
/// the label convention differs between datasets.
struct RegionMapping {
  std::set<std::int32_t> et_labels, tc_labels, wt_labels;

  const std::set<std::int32_t>& labels(int region) const {
    return region == 0 ? et_labels : (region == 1 ? tc_labels : wt_labels);
  }

  void validate() const {
    auto subset = [](const auto& a, const auto& b) { return std::includes(b.begin(), b.end(), a.begin(), a.end()); };
    if (!subset(et_labels, tc_labels) || !subset(tc_labels, wt_labels))
      throw Error(ErrorCode::InvalidMapping, "region mapping must satisfy et ⊆ tc ⊆ wt");
    if (wt_labels.contains(0)) throw Error(ErrorCode::InvalidMapping, "background label 0 cannot belong to a region");
  }

  /// Smallest label of each shell (ET, TC\ET, WT\TC); nullopt when a shell is empty.
  std::array<std::optional<std::int32_t>, 3> shell_representatives() const {
    std::array<std::optional<std::int32_t>, 3> rep;
    if (!et_labels.empty()) rep[0] = *et_labels.begin();
    for (auto l : tc_labels)
      if (!et_labels.contains(l)) { rep[1] = l; break; }
    for (auto l : wt_labels)
      if (!tc_labels.contains(l)) { rep[2] = l; break; }
    return rep;
  }
};

inline void to_json(nlohmann::json& j, const RegionMapping& m) {
  j = nlohmann::json{{"et", m.et_labels}, {"tc", m.tc_labels}, {"wt", m.wt_labels}};
}
inline void from_json(const nlohmann::json& j, RegionMapping& m) {
  for (const auto& [k, v] : j.items())
    if (k != "et" && k != "tc" && k != "wt") throw Error(ErrorCode::InvalidConfig, "unknown region_mapping key '" + k + "'");
  for (const char* k : {"et", "tc", "wt"})
    if (!j.contains(k)) throw Error(ErrorCode::InvalidConfig, std::string("region_mapping needs '") + k + "'");
  m.et_labels = j.at("et").get<std::set<std::int32_t>>();
  m.tc_labels = j.at("tc").get<std::set<std::int32_t>>();
  m.wt_labels = j.at("wt").get<std::set<std::int32_t>>();
  m.validate();
}

struct ManifestEntry {
  std::string case_id;
  std::array<std::filesystem::path, kModalities> modalities;
  std::optional<std::filesystem::path> label;
  std::string split = "train";
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> with_split(const std::string& split) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == split) out.push_back(&e);
    return out;
  }
  const ManifestEntry* find(const std::string& case_id) const {
    for (const auto& e : entries)
      if (e.case_id == case_id) return &e;
    return nullptr;
  }
};

/// Parses a manifest: a JSON array of {case_id, t1, t1gd, t2, flair, label?,
/// split}. Relative paths resolve against the manifest's directory.
inline DatasetManifest parse_manifest(const nlohmann::json& j, const std::filesystem::path& base_dir,
                                      bool check_paths = true) {
  if (!j.is_array()) throw Error(ErrorCode::InvalidConfig, "manifest must be a JSON array");
  DatasetManifest m;
  std::set<std::string> seen;
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  for (const auto& item : j) {
    for (const auto& [k, v] : item.items()) {
      static const std::set<std::string> allowed{"case_id", "t1", "t1gd", "t2", "flair", "label", "split"};
      if (!allowed.contains(k)) throw Error(ErrorCode::InvalidConfig, "unknown manifest key '" + k + "'");
    }
    ManifestEntry e;
    e.case_id = item.at("case_id").get<std::string>();
    if (!seen.insert(e.case_id).second) throw Error(ErrorCode::InvalidConfig, "duplicate case_id '" + e.case_id + "'");
    for (int c = 0; c < kModalities; ++c) e.modalities[c] = resolve(item.at(kModalityNames[c]).get<std::string>());
    if (item.contains("label") && !item.at("label").is_null()) e.label = resolve(item.at("label").get<std::string>());
    e.split = item.value("split", std::string("train"));
    if (check_paths) {
      for (const auto& p : e.modalities)
        if (!std::filesystem::exists(p)) throw Error(ErrorCode::MissingFile, p.string());
      if (e.label && !std::filesystem::exists(*e.label)) throw Error(ErrorCode::MissingFile, e.label->string());
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path, bool check_paths = true) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, "manifest " + path.string() + ": " + e.what());
  }
  return parse_manifest(j, path.parent_path(), check_paths);
}

namespace detail {

inline bool affines_close(const Affine& a, const Affine& b, double tol) {
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      if (std::abs(a[r][c] - b[r][c]) > tol) return false;
  return true;
}

}  // namespace detail

inline constexpr double kHeaderTolerance = 1e-4;

/// Loads four single-modality files into one channel-stacked volume. Geometry
/// comes from the first modality; the others must agree within 1e-4.
inline MultiModalVolume load_volume(const std::array<std::filesystem::path, kModalities>& paths,
                                    const std::string& case_id) {
  for (const auto& p : paths)
    if (!std::filesystem::exists(p)) throw Error(ErrorCode::MissingFile, p.string());
  MultiModalVolume vol;
  vol.case_id = case_id;
  nifti::Header first;
  for (int c = 0; c < kModalities; ++c) {
    nifti::Header h;
    Grid<float> g = nifti::read<float>(paths[c], &h);
    if (c == 0) {
      first = h;
      vol.data = MultiGrid<float>(kModalities, h.shape);
      vol.spacing = h.spacing;
      vol.affine = h.affine;
    } else {
      if (h.shape != first.shape)
        throw Error(ErrorCode::ShapeMismatch, "modality " + std::string(kModalityNames[c]) + " has shape " +
                                                  h.shape.str() + ", expected " + first.shape.str());
      bool spacing_ok = true;
      for (int i = 0; i < 3; ++i) spacing_ok &= std::abs(h.spacing[i] - first.spacing[i]) <= kHeaderTolerance;
      if (!spacing_ok || !detail::affines_close(h.affine, first.affine, kHeaderTolerance))
        throw Error(ErrorCode::HeaderMismatch, "modality " + std::string(kModalityNames[c]) +
                                                   " geometry disagrees with " + kModalityNames[0]);
    }
    vol.data.set_channel(c, g);
  }
  vol.validate();
  return vol;
}

inline MultiModalVolume load_volume(const ManifestEntry& e) { return load_volume(e.modalities, e.case_id); }

inline void save_volume(const MultiModalVolume& vol, const std::array<std::filesystem::path, kModalities>& paths) {
  for (int c = 0; c < kModalities; ++c) nifti::write(paths[c], vol.data.channel_grid(c), vol.spacing, vol.affine);
}

inline LabelMap load_label_map(const std::filesystem::path& path, const std::set<std::int32_t>& vocabulary,
                               const std::string& case_id) {
  nifti::Header h;
  LabelMap lm;
  lm.data = nifti::read<std::int32_t>(path, &h);
  lm.label_vocabulary = vocabulary;
  lm.case_id = case_id;
  lm.spacing = h.spacing;
  lm.affine = h.affine;
  lm.validate();
  return lm;
}

inline void save_label_map(const LabelMap& lm, const std::filesystem::path& path) {
  Grid<std::int16_t> out(lm.data.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<std::int16_t>(lm.data[i]);
  nifti::write(path, out, lm.spacing, lm.affine);
}

inline void save_mask(const Mask& m, const std::filesystem::path& path, const Spacing& sp, const Affine& aff) {
  nifti::write(path, m, sp, aff);
}

inline Mask load_mask(const std::filesystem::path& path, nifti::Header* h = nullptr) {
  Grid<std::uint8_t> m = nifti::read<std::uint8_t>(path, h);
  for (auto& v : m) v = v != 0;
  return m;
}

/// Writes et/tc/wt masks as <dir>/{et,tc,wt}.nii.gz.
inline void save_region_masks(const RegionMaskSet& rm, const std::filesystem::path& dir) {
  for (int r = 0; r < kRegions; ++r) {
    std::string name = kRegionNames[r];
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char ch) { return std::tolower(ch); });
    save_mask(rm.region(r), dir / (name + ".nii.gz"), rm.spacing, rm.affine);
  }
}

inline RegionMaskSet load_region_masks(const std::filesystem::path& dir) {
  RegionMaskSet rm;
  for (int r = 0; r < kRegions; ++r) {
    std::string name = kRegionNames[r];
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char ch) { return std::tolower(ch); });
    nifti::Header h;
    rm.region(r) = load_mask(dir / (name + ".nii.gz"), &h);
    rm.spacing = h.spacing;
    rm.affine = h.affine;
  }
  rm.check_shapes();
  return rm;
}

/// Per-channel z-score over nonzero voxels. Zero voxels stay exactly zero and
/// channels without variance inside the brain collapse to zero.
inline MultiModalVolume normalize_intensities(const MultiModalVolume& vol) {
  MultiModalVolume out = vol;
  for (int c = 0; c < vol.data.channels(); ++c) {
    auto src = vol.data.channel(c);
    auto dst = out.data.channel(c);
    double sum = 0.0, sum_sq = 0.0;
    std::size_t n = 0;
    for (float v : src)
      if (v != 0.0f) {
        sum += v;
        ++n;
      }
    if (n == 0) continue;
    const double mean = sum / static_cast<double>(n);
    for (float v : src)
      if (v != 0.0f) sum_sq += (v - mean) * (v - mean);
    const double var = sum_sq / static_cast<double>(n);
    const double sd = std::sqrt(var);
    const bool degenerate = !(sd > 1e-12 * std::max(1.0, std::abs(mean)));
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i] == 0.0f || degenerate) dst[i] = 0.0f;
      else dst[i] = static_cast<float>((src[i] - mean) / sd);
    }
  }
  return out;
}

inline RegionMaskSet labels_to_regions(const LabelMap& lm, const RegionMapping& mapping) {
  mapping.validate();
  lm.validate();
  RegionMaskSet rm(lm.data.shape(), lm.spacing);
  rm.affine = lm.affine;
  for (std::size_t i = 0; i < lm.data.size(); ++i) {
    const auto v = lm.data[i];
    rm.et[i] = mapping.et_labels.contains(v);
    rm.tc[i] = mapping.tc_labels.contains(v);
    rm.wt[i] = mapping.wt_labels.contains(v);
  }
  return rm;
}

/// Inverse of labels_to_regions up to one representative label per shell.
inline LabelMap regions_to_labels(const RegionMaskSet& rm, const RegionMapping& mapping,
                                  const std::string& case_id = {}) {
  mapping.validate();
  if (!rm.is_nested()) throw Error(ErrorCode::NestingViolation, "region masks violate ET ⊆ TC ⊆ WT");
  const auto rep = mapping.shell_representatives();
  LabelMap lm;
  lm.data = Grid<std::int32_t>(rm.shape(), 0);
  lm.case_id = case_id;
  lm.spacing = rm.spacing;
  lm.affine = rm.affine;
  lm.label_vocabulary = {0};
  lm.label_vocabulary.insert(mapping.wt_labels.begin(), mapping.wt_labels.end());
  for (std::size_t i = 0; i < rm.wt.size(); ++i) {
    int shell = rm.et[i] ? 0 : (rm.tc[i] ? 1 : (rm.wt[i] ? 2 : -1));
    if (shell < 0) continue;
    if (!rep[shell])
      throw Error(ErrorCode::InvalidMapping,
                  std::string("mapping has no label for the ") + kRegionNames[shell] + " shell");
    lm.data[i] = *rep[shell];
  }
  return lm;
}

}  // namespace pedseg
