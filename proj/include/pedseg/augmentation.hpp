#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pedseg/error.hpp"
#include "pedseg/grid.hpp"
#include "pedseg/volume_io.hpp"

namespace pedseg::aug {

enum class TransformKind { Flip, Affine, ElasticDeformation, Noise, RescaleIntensity, RandomBiasField };

inline constexpr std::array<const char*, 6> kTransformNames = {"flip",  "affine",           "elastic",
                                                                "noise", "rescale_intensity", "bias_field"};

inline TransformKind transform_kind_from_string(const std::string& s) {
  for (std::size_t i = 0; i < kTransformNames.size(); ++i)
    if (s == kTransformNames[i]) return static_cast<TransformKind>(i);
  throw Error(ErrorCode::InvalidConfig, "unknown transform '" + s + "'");
}

inline bool is_spatial(TransformKind k) {
  return k == TransformKind::Flip || k == TransformKind::Affine || k == TransformKind::ElasticDeformation;
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Sampling ranges for one transform. Only the fields relevant to `kind` are
/// read; the defaults are the shipped augmentation settings.
struct TransformParams {
  TransformKind kind = TransformKind::Flip;
  std::array<double, 3> flip_probability{0.5, 0.5, 0.5};
  Range rotation_degrees{-10.0, 10.0};
  Range scale{0.9, 1.1};
  Range translation_mm{0.0, 0.0};
  int elastic_control_points = 7;
  double elastic_max_displacement_mm = 7.5;
  Range noise_std{0.0, 0.1};  // fraction of the channel's standard deviation
  Range intensity_out{0.0, 1.0};
  int bias_order = 3;
  Range bias_coefficient{-0.5, 0.5};

  void validate() const {
    auto range_ok = [](const Range& r) { return std::isfinite(r.lo) && std::isfinite(r.hi) && r.lo <= r.hi; };
    for (double p : flip_probability)
      if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::InvalidConfig, "flip probability outside [0,1]");
    if (!range_ok(rotation_degrees) || !range_ok(scale) || !range_ok(translation_mm) || !range_ok(noise_std) ||
        !range_ok(intensity_out) || !range_ok(bias_coefficient))
      throw Error(ErrorCode::InvalidConfig, "augmentation range with min > max");
    if (scale.lo <= 0.0) throw Error(ErrorCode::InvalidConfig, "affine scale must be positive");
    if (elastic_control_points < 2) throw Error(ErrorCode::InvalidConfig, "elastic grid needs >= 2 control points");
    if (elastic_max_displacement_mm < 0.0) throw Error(ErrorCode::InvalidConfig, "negative elastic displacement");
    if (noise_std.lo < 0.0) throw Error(ErrorCode::InvalidConfig, "negative noise std");
    if (bias_order < 0) throw Error(ErrorCode::InvalidConfig, "negative bias field order");
  }
};

struct SingleTransform {
  TransformParams params;
  double probability = 0.0;
};

struct AugmentationPolicy {
  std::vector<SingleTransform> singles;
  std::vector<TransformParams> composite;
  double composite_probability = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    auto prob_ok = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob_ok(composite_probability)) throw Error(ErrorCode::InvalidConfig, "composite probability outside [0,1]");
    for (const auto& s : singles) {
      if (!prob_ok(s.probability)) throw Error(ErrorCode::InvalidConfig, "single probability outside [0,1]");
      s.params.validate();
    }
    for (const auto& p : composite) p.validate();
  }
};

/// One transform with every random quantity already drawn.
struct ConcreteStep {
  TransformKind kind = TransformKind::Flip;
  std::array<bool, 3> flip{false, false, false};
  std::array<std::array<double, 3>, 3> linear{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};  // rotation * scale
  std::array<double, 3> translation_mm{0, 0, 0};
  int control_points = 0;
  std::vector<std::array<double, 3>> control_displacement_mm;  // control_points^3, x fastest
  double noise_fraction = 0.0;
  std::uint64_t noise_seed = 0;
  Range intensity_out{0.0, 1.0};
  int bias_order = 0;
  std::vector<double> bias_coefficients;  // one per monomial with total degree <= order
};

struct ConcreteTransform {
  std::vector<ConcreteStep> steps;
  bool is_identity() const noexcept { return steps.empty(); }
};

/// Deterministic per-case stream derived from the policy seed and the case's
/// ordinal in its batch.
inline std::mt19937_64 rng_for_case(std::uint64_t seed, std::uint64_t ordinal) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(ordinal), static_cast<std::uint32_t>(ordinal >> 32), 0xA57u};
  return std::mt19937_64(seq);
}

namespace detail {

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 matmul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
  return r;
}

inline Mat3 inverse(const Mat3& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  Mat3 r{};
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return r;
}

inline Mat3 rotation_xyz(double ax, double ay, double az) {
  const double cx = std::cos(ax), sx = std::sin(ax);
  const double cy = std::cos(ay), sy = std::sin(ay);
  const double cz = std::cos(az), sz = std::sin(az);
  const Mat3 rx{{{1, 0, 0}, {0, cx, -sx}, {0, sx, cx}}};
  const Mat3 ry{{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
  const Mat3 rz{{{cz, -sz, 0}, {sz, cz, 0}, {0, 0, 1}}};
  return matmul(rz, matmul(ry, rx));
}

inline double uniform(std::mt19937_64& rng, const Range& r) {
  if (r.lo == r.hi) {
    (void)rng();  // keep the stream position independent of the range
    return r.lo;
  }
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

inline int monomial_count(int order) { return (order + 1) * (order + 2) * (order + 3) / 6; }

template <class F>
void for_each_monomial(int order, F&& f) {
  int idx = 0;
  for (int i = 0; i <= order; ++i)
    for (int j = 0; j <= order - i; ++j)
      for (int k = 0; k <= order - i - j; ++k) f(idx++, i, j, k);
}

// Maps each output voxel to a source position (in voxel units).
using SourceMap = std::vector<std::array<double, 3>>;

inline SourceMap affine_source_map(const ConcreteStep& st, const Shape3& s, const Spacing& sp) {
  const Mat3 inv = inverse(st.linear);
  SourceMap map(s.voxels());
  std::array<double, 3> c;
  for (int a = 0; a < 3; ++a) c[a] = 0.5 * (s[a] - 1) * sp[a];
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        const std::array<double, 3> q{x * sp[0] - c[0] - st.translation_mm[0], y * sp[1] - c[1] - st.translation_mm[1],
                                      z * sp[2] - c[2] - st.translation_mm[2]};
        auto& out = map[s.index(x, y, z)];
        for (int a = 0; a < 3; ++a) {
          double p = inv[a][0] * q[0] + inv[a][1] * q[1] + inv[a][2] * q[2];
          out[a] = (p + c[a]) / sp[a];
        }
      }
  return map;
}

inline SourceMap elastic_source_map(const ConcreteStep& st, const Shape3& s, const Spacing& sp) {
  const int cp = st.control_points;
  SourceMap map(s.voxels());
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        const std::array<int, 3> v{x, y, z};
        std::array<int, 3> i0;
        std::array<double, 3> f;
        for (int a = 0; a < 3; ++a) {
          double g = s[a] > 1 ? double(v[a]) * (cp - 1) / (s[a] - 1) : 0.0;
          i0[a] = std::min(static_cast<int>(std::floor(g)), cp - 2);
          f[a] = g - i0[a];
        }
        std::array<double, 3> d{0, 0, 0};
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const double w = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]);
              const auto& disp =
                  st.control_displacement_mm[((i0[2] + dz) * cp + (i0[1] + dy)) * cp + (i0[0] + dx)];
              for (int a = 0; a < 3; ++a) d[a] += w * disp[a];
            }
        auto& out = map[s.index(x, y, z)];
        for (int a = 0; a < 3; ++a) out[a] = v[a] + d[a] / sp[a];
      }
  return map;
}

inline float sample_trilinear(std::span<const float> ch, const Shape3& s, const std::array<double, 3>& p) {
  const int x0 = static_cast<int>(std::floor(p[0]));
  const int y0 = static_cast<int>(std::floor(p[1]));
  const int z0 = static_cast<int>(std::floor(p[2]));
  if (x0 < -1 || y0 < -1 || z0 < -1 || x0 >= s.nx || y0 >= s.ny || z0 >= s.nz) return 0.0f;
  const double fx = p[0] - x0, fy = p[1] - y0, fz = p[2] - z0;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const int xi = x0 + dx, yi = y0 + dy, zi = z0 + dz;
        if (!s.contains(xi, yi, zi)) continue;
        const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
        if (w == 0.0) continue;
        acc += w * ch[s.index(xi, yi, zi)];
      }
  return static_cast<float>(acc);
}

template <class T>
T sample_nearest(const Grid<T>& g, const std::array<double, 3>& p) {
  const int x = static_cast<int>(std::lround(p[0]));
  const int y = static_cast<int>(std::lround(p[1]));
  const int z = static_cast<int>(std::lround(p[2]));
  return g.shape().contains(x, y, z) ? g(x, y, z) : T{};
}

inline void resample(const SourceMap& map, MultiModalVolume& vol, LabelMap& labels) {
  const Shape3 s = vol.shape();
  MultiGrid<float> out(vol.data.channels(), s);
  for (int c = 0; c < vol.data.channels(); ++c) {
    auto src = vol.data.channel(c);
    auto dst = out.channel(c);
    for (std::size_t i = 0; i < map.size(); ++i) dst[i] = sample_trilinear(src, s, map[i]);
  }
  Grid<std::int32_t> lab(s);
  for (std::size_t i = 0; i < map.size(); ++i) lab[i] = sample_nearest(labels.data, map[i]);
  vol.data = std::move(out);
  labels.data = std::move(lab);
}

template <class T>
void flip_grid(std::span<T> data, const Shape3& s, const std::array<bool, 3>& axes) {
  std::vector<T> tmp(data.begin(), data.end());
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        const int sx = axes[0] ? s.nx - 1 - x : x;
        const int sy = axes[1] ? s.ny - 1 - y : y;
        const int sz = axes[2] ? s.nz - 1 - z : z;
        data[s.index(x, y, z)] = tmp[s.index(sx, sy, sz)];
      }
}

}  // namespace detail

inline ConcreteStep sample_step(const TransformParams& p, std::mt19937_64& rng) {
  ConcreteStep st;
  st.kind = p.kind;
  switch (p.kind) {
    case TransformKind::Flip:
      for (int a = 0; a < 3; ++a) st.flip[a] = detail::uniform(rng, {0.0, 1.0}) < p.flip_probability[a];
      break;
    case TransformKind::Affine: {
      std::array<double, 3> angle, scale;
      for (auto& a : angle) a = detail::uniform(rng, p.rotation_degrees) * std::numbers::pi / 180.0;
      for (auto& s : scale) s = detail::uniform(rng, p.scale);
      for (auto& t : st.translation_mm) t = detail::uniform(rng, p.translation_mm);
      const detail::Mat3 sc{{{scale[0], 0, 0}, {0, scale[1], 0}, {0, 0, scale[2]}}};
      st.linear = detail::matmul(detail::rotation_xyz(angle[0], angle[1], angle[2]), sc);
      break;
    }
    case TransformKind::ElasticDeformation: {
      const int cp = p.elastic_control_points;
      st.control_points = cp;
      st.control_displacement_mm.assign(static_cast<std::size_t>(cp) * cp * cp, {0, 0, 0});
      const Range r{-p.elastic_max_displacement_mm, p.elastic_max_displacement_mm};
      for (int z = 0; z < cp; ++z)
        for (int y = 0; y < cp; ++y)
          for (int x = 0; x < cp; ++x) {
            const bool border = x == 0 || y == 0 || z == 0 || x == cp - 1 || y == cp - 1 || z == cp - 1;
            auto& d = st.control_displacement_mm[(z * cp + y) * cp + x];
            for (auto& v : d) {
              double draw = detail::uniform(rng, r);
              v = border ? 0.0 : draw;
            }
          }
      break;
    }
    case TransformKind::Noise:
      st.noise_fraction = detail::uniform(rng, p.noise_std);
      st.noise_seed = rng();
      break;
    case TransformKind::RescaleIntensity:
      st.intensity_out = p.intensity_out;
      break;
    case TransformKind::RandomBiasField:
      st.bias_order = p.bias_order;
      st.bias_coefficients.resize(detail::monomial_count(p.bias_order));
      for (auto& c : st.bias_coefficients) c = detail::uniform(rng, p.bias_coefficient);
      break;
  }
  return st;
}

/// Draws a concrete transform. With probability `composite_probability` the
/// whole composite chain is drawn in order; otherwise one single transform is
/// picked uniformly and kept with its own application probability.
inline ConcreteTransform sample_transform(const AugmentationPolicy& policy, std::mt19937_64& rng) {
  ConcreteTransform t;
  const double u = detail::uniform(rng, {0.0, 1.0});
  if (!policy.composite.empty() && u < policy.composite_probability) {
    for (const auto& p : policy.composite) t.steps.push_back(sample_step(p, rng));
    return t;
  }
  if (policy.singles.empty()) return t;
  const auto pick = std::uniform_int_distribution<std::size_t>(0, policy.singles.size() - 1)(rng);
  const auto& single = policy.singles[pick];
  if (detail::uniform(rng, {0.0, 1.0}) < single.probability) t.steps.push_back(sample_step(single.params, rng));
  return t;
}

/// Multiplicative field exp(sum_k c_k x^i y^j z^k) over coordinates scaled to
/// [-1, 1]; strictly positive by construction.
inline Grid<float> bias_field(const ConcreteStep& st, const Shape3& s) {
  Grid<float> field(s);
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        auto norm = [](int v, int n) { return n > 1 ? 2.0 * v / (n - 1) - 1.0 : 0.0; };
        const double nx = norm(x, s.nx), ny = norm(y, s.ny), nz = norm(z, s.nz);
        double e = 0.0;
        detail::for_each_monomial(st.bias_order, [&](int idx, int i, int j, int k) {
          e += st.bias_coefficients[idx] * std::pow(nx, i) * std::pow(ny, j) * std::pow(nz, k);
        });
        field(x, y, z) = static_cast<float>(std::exp(e));
      }
  return field;
}

inline void apply_step(const ConcreteStep& st, MultiModalVolume& vol, LabelMap& labels) {
  const Shape3 s = vol.shape();
  switch (st.kind) {
    case TransformKind::Flip:
      if (!st.flip[0] && !st.flip[1] && !st.flip[2]) return;
      for (int c = 0; c < vol.data.channels(); ++c) detail::flip_grid(vol.data.channel(c), s, st.flip);
      detail::flip_grid(labels.data.values(), s, st.flip);
      return;
    case TransformKind::Affine:
      detail::resample(detail::affine_source_map(st, s, vol.spacing), vol, labels);
      return;
    case TransformKind::ElasticDeformation:
      detail::resample(detail::elastic_source_map(st, s, vol.spacing), vol, labels);
      return;
    case TransformKind::Noise: {
      std::mt19937_64 rng(st.noise_seed);
      for (int c = 0; c < vol.data.channels(); ++c) {
        auto ch = vol.data.channel(c);
        double sum = 0.0, sq = 0.0;
        for (float v : ch) sum += v;
        const double mean = sum / ch.size();
        for (float v : ch) sq += (v - mean) * (v - mean);
        const double sigma = st.noise_fraction * std::sqrt(sq / ch.size());
        std::normal_distribution<double> nd(0.0, 1.0);
        for (auto& v : ch) v = static_cast<float>(v + sigma * nd(rng));
      }
      return;
    }
    case TransformKind::RescaleIntensity:
      for (int c = 0; c < vol.data.channels(); ++c) {
        auto ch = vol.data.channel(c);
        auto [mn, mx] = std::minmax_element(ch.begin(), ch.end());
        const double lo = *mn, hi = *mx;
        const double out_lo = st.intensity_out.lo, out_hi = st.intensity_out.hi;
        for (auto& v : ch) {
          double r = hi > lo ? out_lo + (v - lo) * (out_hi - out_lo) / (hi - lo) : out_lo;
          v = static_cast<float>(std::clamp(r, out_lo, out_hi));
        }
      }
      return;
    case TransformKind::RandomBiasField: {
      const Grid<float> field = bias_field(st, s);
      for (int c = 0; c < vol.data.channels(); ++c) {
        auto ch = vol.data.channel(c);
        for (std::size_t i = 0; i < ch.size(); ++i) ch[i] *= field[i];
      }
      return;
    }
  }
}

/// Applies every step in order. Spatial steps move image (trilinear) and
/// labels (nearest neighbour) together; intensity steps leave labels alone.
inline std::pair<MultiModalVolume, LabelMap> apply_transform(const ConcreteTransform& t, const MultiModalVolume& vol,
                                                             const LabelMap& labels) {
  if (vol.shape() != labels.data.shape())
    throw Error(ErrorCode::MisalignedPair,
                "image " + vol.shape().str() + " vs labels " + labels.data.shape().str() + " (case '" + vol.case_id + "')");
  std::pair<MultiModalVolume, LabelMap> out{vol, labels};
  for (const auto& st : t.steps) apply_step(st, out.first, out.second);
  return out;
}

struct AugmentCase {
  MultiModalVolume volume;
  LabelMap labels;
};

inline std::vector<AugmentCase> augment_batch(const AugmentationPolicy& policy, const std::vector<AugmentCase>& cases) {
  policy.validate();
  std::vector<AugmentCase> out;
  out.reserve(cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    auto rng = rng_for_case(policy.seed, i);
    const ConcreteTransform t = sample_transform(policy, rng);
    auto [v, l] = apply_transform(t, cases[i].volume, cases[i].labels);
    out.push_back({std::move(v), std::move(l)});
  }
  return out;
}

// ---- configuration --------------------------------------------------------

namespace detail {

inline Range range_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) throw Error(ErrorCode::InvalidConfig, "range must be [min, max]");
  return {j[0].get<double>(), j[1].get<double>()};
}

inline TransformParams params_from_json(const nlohmann::json& j) {
  static const std::set<std::string> allowed{"kind",       "flip_probability", "rotation_degrees",
                                             "scale",      "translation_mm",   "control_points",
                                             "max_displacement_mm", "noise_std", "intensity_out",
                                             "bias_order", "bias_coefficient", "probability"};
  for (const auto& [k, v] : j.items())
    if (!allowed.contains(k)) throw Error(ErrorCode::InvalidConfig, "unknown augmentation key '" + k + "'");
  TransformParams p;
  p.kind = transform_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("flip_probability")) {
    const auto& f = j.at("flip_probability");
    if (f.is_number()) p.flip_probability.fill(f.get<double>());
    else p.flip_probability = f.get<std::array<double, 3>>();
  }
  if (j.contains("rotation_degrees")) p.rotation_degrees = range_from_json(j.at("rotation_degrees"));
  if (j.contains("scale")) p.scale = range_from_json(j.at("scale"));
  if (j.contains("translation_mm")) p.translation_mm = range_from_json(j.at("translation_mm"));
  if (j.contains("control_points")) p.elastic_control_points = j.at("control_points").get<int>();
  if (j.contains("max_displacement_mm")) p.elastic_max_displacement_mm = j.at("max_displacement_mm").get<double>();
  if (j.contains("noise_std")) p.noise_std = range_from_json(j.at("noise_std"));
  if (j.contains("intensity_out")) p.intensity_out = range_from_json(j.at("intensity_out"));
  if (j.contains("bias_order")) p.bias_order = j.at("bias_order").get<int>();
  if (j.contains("bias_coefficient")) p.bias_coefficient = range_from_json(j.at("bias_coefficient"));
  p.validate();
  return p;
}

}  // namespace detail

/// Parses the `augmentation:` config block:
///   { "singles": [{"kind": "flip", "probability": 0.5, ...}],
///     "composite": {"probability": 0.3, "transforms": [{"kind": ...}]} }
inline AugmentationPolicy policy_from_json(const nlohmann::json& j, std::uint64_t seed) {
  AugmentationPolicy policy;
  policy.seed = seed;
  for (const auto& [k, v] : j.items())
    if (k != "singles" && k != "composite")
      throw Error(ErrorCode::InvalidConfig, "unknown augmentation key '" + k + "'");
  if (j.contains("singles"))
    for (const auto& item : j.at("singles"))
      policy.singles.push_back({detail::params_from_json(item), item.value("probability", 1.0)});
  if (j.contains("composite")) {
    const auto& c = j.at("composite");
    for (const auto& [k, v] : c.items())
      if (k != "probability" && k != "transforms")
        throw Error(ErrorCode::InvalidConfig, "unknown composite key '" + k + "'");
    policy.composite_probability = c.value("probability", 0.0);
    for (const auto& item : c.at("transforms")) policy.composite.push_back(detail::params_from_json(item));
  }
  policy.validate();
  return policy;
}

}  // namespace pedseg::aug
