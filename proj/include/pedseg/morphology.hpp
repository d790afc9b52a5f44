#pragma once

// Binary morphology, connected components and distance transforms on Mask
// grids. Structuring elements of radius r are (2r+1)^3 cubes, i.e. balls in
// the chessboard metric.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <vector>

#include "pedseg/error.hpp"
#include "pedseg/grid.hpp"

namespace pedseg::morph {

enum class Connectivity { Six = 6, Eighteen = 18, TwentySix = 26 };

inline Connectivity connectivity_from_int(int c) {
  switch (c) {
    case 6: return Connectivity::Six;
    case 18: return Connectivity::Eighteen;
    case 26: return Connectivity::TwentySix;
    default: throw Error(ErrorCode::InvalidConfig, "connectivity must be 6, 18 or 26");
  }
}

inline std::vector<std::array<int, 3>> neighbor_offsets(Connectivity conn) {
  std::vector<std::array<int, 3>> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int m = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (m == 0) continue;
        if (conn == Connectivity::Six && m > 1) continue;
        if (conn == Connectivity::Eighteen && m > 2) continue;
        out.push_back({dx, dy, dz});
      }
  return out;
}

struct Components {
  Grid<std::int32_t> labels;       // 0 = background, 1..count
  std::vector<std::size_t> sizes;  // sizes[k] is the size of component k+1

  std::size_t count() const noexcept { return sizes.size(); }
};

/// Labels components in raster order of their first voxel.
inline Components label_components(const Mask& mask, Connectivity conn) {
  const Shape3 s = mask.shape();
  Components out{Grid<std::int32_t>(s, 0), {}};
  const auto offsets = neighbor_offsets(conn);
  std::vector<std::size_t> queue;
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        const std::size_t start = s.index(x, y, z);
        if (!mask[start] || out.labels[start]) continue;
        const auto id = static_cast<std::int32_t>(out.sizes.size() + 1);
        queue.assign(1, start);
        out.labels[start] = id;
        std::size_t head = 0;
        while (head < queue.size()) {
          const std::size_t cur = queue[head++];
          const int cx = static_cast<int>(cur % s.nx);
          const int cy = static_cast<int>((cur / s.nx) % s.ny);
          const int cz = static_cast<int>(cur / (static_cast<std::size_t>(s.nx) * s.ny));
          for (const auto& o : offsets) {
            const int nx = cx + o[0], ny = cy + o[1], nz = cz + o[2];
            if (!s.contains(nx, ny, nz)) continue;
            const std::size_t ni = s.index(nx, ny, nz);
            if (mask[ni] && !out.labels[ni]) {
              out.labels[ni] = id;
              queue.push_back(ni);
            }
          }
        }
        out.sizes.push_back(queue.size());
      }
  return out;
}

namespace detail {

// Running max (dilate) or min (erode) over a window of half-width r along
// one axis. Outside voxels read as `outside`.
inline void filter_axis(Mask& m, int axis, int r, bool dilate, std::uint8_t outside) {
  const Shape3 s = m.shape();
  const int n = s[axis];
  std::vector<std::uint8_t> line(n), res(n);
  std::array<int, 3> ext{s.nx, s.ny, s.nz};
  ext[axis] = 1;
  for (int c = 0; c < ext[2]; ++c)
    for (int b = 0; b < ext[1]; ++b)
      for (int a = 0; a < ext[0]; ++a) {
        auto at = [&](int i) -> std::uint8_t& {
          std::array<int, 3> p{a, b, c};
          p[axis] = i;
          return m(p[0], p[1], p[2]);
        };
        for (int i = 0; i < n; ++i) line[i] = at(i);
        // Prefix counts of set voxels give each window's sum in O(1).
        std::vector<int> prefix(n + 1, 0);
        for (int i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + (line[i] != 0);
        for (int i = 0; i < n; ++i) {
          const int lo = i - r, hi = i + r;
          const int clo = std::max(lo, 0), chi = std::min(hi, n - 1);
          const int on = prefix[chi + 1] - prefix[clo];
          const int inside = chi - clo + 1;
          const bool has_outside = lo < 0 || hi > n - 1;
          if (dilate) res[i] = on > 0 || (has_outside && outside);
          else res[i] = on == inside && (!has_outside || outside);
        }
        for (int i = 0; i < n; ++i) at(i) = res[i];
      }
}

inline Mask pad(const Mask& m, int r) {
  const Shape3 s = m.shape();
  Mask out(Shape3{s.nx + 2 * r, s.ny + 2 * r, s.nz + 2 * r}, 0);
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) out(x + r, y + r, z + r) = m(x, y, z);
  return out;
}

inline Mask crop(const Mask& m, int r, Shape3 s) {
  Mask out(s);
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) out(x, y, z) = m(x + r, y + r, z + r);
  return out;
}

}  // namespace detail

/// Dilation truncated to the grid.
inline Mask dilate(const Mask& m, int radius) {
  Mask out = m;
  for (auto& v : out) v = v != 0;
  for (int a = 0; a < 3; ++a) detail::filter_axis(out, a, radius, true, 0);
  return out;
}

/// Erosion treating voxels outside the grid as background.
inline Mask erode(const Mask& m, int radius) {
  Mask out = m;
  for (auto& v : out) v = v != 0;
  for (int a = 0; a < 3; ++a) detail::filter_axis(out, a, radius, false, 0);
  return out;
}

/// Closing evaluated on a zero-padded grid so the result equals the
/// unbounded-lattice closing restricted to the grid.
inline Mask close(const Mask& m, int radius) {
  Mask p = detail::pad(m, radius);
  for (int a = 0; a < 3; ++a) detail::filter_axis(p, a, radius, true, 0);
  for (int a = 0; a < 3; ++a) detail::filter_axis(p, a, radius, false, 0);
  return detail::crop(p, radius, m.shape());
}

inline Mask open(const Mask& m, int radius) { return dilate(erode(m, radius), radius); }

/// Voxels of `m` with at least one 6-neighbour outside `m` (grid exterior
/// counts as outside).
inline Mask surface(const Mask& m) {
  const Shape3 s = m.shape();
  Mask out(s, 0);
  static constexpr int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        if (!m(x, y, z)) continue;
        for (const auto& o : off) {
          const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
          if (!s.contains(nx, ny, nz) || !m(nx, ny, nz)) {
            out(x, y, z) = 1;
            break;
          }
        }
      }
  return out;
}

namespace detail {

// One-dimensional squared distance transform (lower envelope of parabolas)
// with sample spacing h.
inline void edt_1d(const double* f, double* d, int n, double h, std::vector<int>& v, std::vector<double>& zb) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  zb.assign(n + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    const double pq = q * h;
    while (k >= 0) {
      const double pv = v[k] * h;
      const double s = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2.0 * (pq - pv));
      if (s <= zb[k]) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    zb[k] = k == 0 ? -inf : ((f[q] + pq * pq) - (f[v[k - 1]] + (v[k - 1] * h) * (v[k - 1] * h))) /
                                (2.0 * (pq - v[k - 1] * h));
    zb[k + 1] = inf;
  }
  if (k < 0) {
    for (int q = 0; q < n; ++q) d[q] = inf;
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (zb[j + 1] < q * h) ++j;
    const double diff = (q - v[j]) * h;
    d[q] = diff * diff + f[v[j]];
  }
}

}  // namespace detail

/// Squared Euclidean distance (mm^2) from every voxel to the nearest set
/// voxel of `sites`; +inf everywhere when `sites` is empty.
inline Grid<double> squared_distance_transform(const Mask& sites, const Spacing& spacing) {
  const Shape3 s = sites.shape();
  constexpr double inf = std::numeric_limits<double>::infinity();
  Grid<double> g(s);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = sites[i] ? 0.0 : inf;
  std::vector<int> v;
  std::vector<double> zb;
  for (int axis = 0; axis < 3; ++axis) {
    const int n = s[axis];
    std::vector<double> f(n), d(n);
    std::array<int, 3> ext{s.nx, s.ny, s.nz};
    ext[axis] = 1;
    for (int c = 0; c < ext[2]; ++c)
      for (int b = 0; b < ext[1]; ++b)
        for (int a = 0; a < ext[0]; ++a) {
          auto idx = [&](int i) {
            std::array<int, 3> p{a, b, c};
            p[axis] = i;
            return s.index(p[0], p[1], p[2]);
          };
          for (int i = 0; i < n; ++i) f[i] = g[idx(i)];
          detail::edt_1d(f.data(), d.data(), n, spacing[axis], v, zb);
          for (int i = 0; i < n; ++i) g[idx(i)] = d[i];
        }
  }
  return g;
}

}  // namespace pedseg::morph
