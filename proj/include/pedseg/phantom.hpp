#pragma once

// Synthetic multi-modal tumor phantoms for desk-scale runs and tests.
// Labels follow a four-class convention: 1 enhancing rim, 2 non-enhancing
// core, 4 edema. Pair with a mapping such as et={1}, tc={1,2}, wt={1,2,4}.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "pedseg/volume_io.hpp"

namespace pedseg {

struct PhantomOptions {
  Shape3 shape{32, 32, 32};
  Spacing spacing{1.0, 1.0, 1.0};
  double noise_std = 0.05;
};

struct Phantom {
  MultiModalVolume volume;
  LabelMap labels;
};

inline Phantom make_phantom(std::uint64_t seed, const PhantomOptions& opt = {}, const std::string& case_id = "phantom") {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const Shape3 s = opt.shape;
  const double n_min = std::min({s.nx, s.ny, s.nz});

  std::array<double, 3> brain_c, brain_r, tumor_c, tumor_axes;
  for (int a = 0; a < 3; ++a) {
    brain_c[a] = 0.5 * (s[a] - 1);
    brain_r[a] = 0.46 * s[a];
    tumor_c[a] = brain_c[a] + (u01(rng) - 0.5) * 0.25 * s[a];
    tumor_axes[a] = 0.85 + 0.3 * u01(rng);
  }
  const double wt_r = n_min * (0.2 + 0.08 * u01(rng));
  const double tc_r = wt_r * (0.55 + 0.1 * u01(rng));
  const double core_r = tc_r * (0.45 + 0.15 * u01(rng));

  // {T1, T1Gd, T2, FLAIR} mean intensity per tissue.
  constexpr std::array<std::array<double, 4>, 4> tissue = {{
      {1.0, 1.0, 1.0, 1.0},  // brain
      {0.9, 2.0, 1.4, 1.5},  // enhancing rim
      {0.6, 0.7, 1.9, 1.3},  // necrotic / non-enhancing core
      {0.8, 0.9, 1.6, 1.8},  // edema
  }};
  std::array<double, 4> gain;
  for (auto& g : gain) g = 0.8 + 0.4 * u01(rng);

  Phantom p;
  p.volume.case_id = case_id;
  p.volume.spacing = opt.spacing;
  p.volume.affine = identity_affine(opt.spacing);
  p.volume.data = MultiGrid<float>(kModalities, s, 0.0f);
  p.labels.case_id = case_id;
  p.labels.data = Grid<std::int32_t>(s, 0);
  p.labels.label_vocabulary = {0, 1, 2, 4};
  p.labels.spacing = opt.spacing;
  p.labels.affine = p.volume.affine;

  std::normal_distribution<double> noise(0.0, opt.noise_std);
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        const std::array<double, 3> q{double(x), double(y), double(z)};
        double rb = 0.0, rt = 0.0;
        for (int a = 0; a < 3; ++a) {
          rb += std::pow((q[a] - brain_c[a]) / brain_r[a], 2);
          rt += std::pow((q[a] - tumor_c[a]) / tumor_axes[a], 2);
        }
        if (rb > 1.0) continue;
        rt = std::sqrt(rt);
        int tissue_idx = 0;
        std::int32_t label = 0;
        if (rt <= core_r) {
          tissue_idx = 2;
          label = 2;
        } else if (rt <= tc_r) {
          tissue_idx = 1;
          label = 1;
        } else if (rt <= wt_r) {
          tissue_idx = 3;
          label = 4;
        }
        p.labels.data(x, y, z) = label;
        const double shading = 1.0 + 0.1 * std::sin(0.2 * x) * std::cos(0.15 * y);
        for (int c = 0; c < kModalities; ++c) {
          double v = gain[c] * tissue[tissue_idx][c] * shading + noise(rng);
          p.volume.data.at(c, x, y, z) = static_cast<float>(std::max(v, 1e-3));
        }
      }
  return p;
}

inline RegionMapping phantom_region_mapping() {
  RegionMapping m;
  m.et_labels = {1};
  m.tc_labels = {1, 2};
  m.wt_labels = {1, 2, 4};
  return m;
}

}  // namespace pedseg
