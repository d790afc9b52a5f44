#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pedseg/error.hpp"

namespace pedseg {

/// Spatial extent of a 3D grid. Voxels are stored with x varying fastest,
/// matching the on-disk order of the volume container.
struct Shape3 {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t voxels() const noexcept {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  int operator[](int axis) const noexcept { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
  int& operator[](int axis) noexcept { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
  std::size_t index(int x, int y, int z) const noexcept {
    return (static_cast<std::size_t>(z) * ny + y) * nx + x;
  }
  bool contains(int x, int y, int z) const noexcept {
    return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
  }
  friend bool operator==(const Shape3&, const Shape3&) = default;

  std::string str() const {
    return std::to_string(nx) + "x" + std::to_string(ny) + "x" + std::to_string(nz);
  }
};

using Spacing = std::array<double, 3>;
using Affine = std::array<std::array<double, 4>, 4>;

inline Affine identity_affine(const Spacing& spacing = {1.0, 1.0, 1.0}) {
  Affine a{};
  for (int i = 0; i < 3; ++i) a[i][i] = spacing[i];
  a[3][3] = 1.0;
  return a;
}

/// Dense scalar field on a Shape3 lattice.
template <class T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  explicit Grid(Shape3 shape, T fill = T{}) : shape_(shape), data_(shape.voxels(), fill) {}
  Grid(Shape3 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.voxels())
      throw Error(ErrorCode::ShapeMismatch, "grid data size does not match shape " + shape_.str());
  }

  const Shape3& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int x, int y, int z) noexcept { return data_[shape_.index(x, y, z)]; }
  const T& operator()(int x, int y, int z) const noexcept { return data_[shape_.index(x, y, z)]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  Shape3 shape_{};
  std::vector<T> data_;
};

using Mask = Grid<std::uint8_t>;

/// Channel-major stack of equally shaped grids: element (c, x, y, z) lives at
/// c * voxels + shape.index(x, y, z).
template <class T>
class MultiGrid {
 public:
  MultiGrid() = default;
  MultiGrid(int channels, Shape3 shape, T fill = T{})
      : channels_(channels), shape_(shape), data_(static_cast<std::size_t>(channels) * shape.voxels(), fill) {}

  int channels() const noexcept { return channels_; }
  const Shape3& shape() const noexcept { return shape_; }
  std::size_t voxels() const noexcept { return shape_.voxels(); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> channel(int c) noexcept { return std::span<T>(data_).subspan(c * voxels(), voxels()); }
  std::span<const T> channel(int c) const noexcept {
    return std::span<const T>(data_).subspan(c * voxels(), voxels());
  }
  T& at(int c, int x, int y, int z) noexcept { return data_[c * voxels() + shape_.index(x, y, z)]; }
  const T& at(int c, int x, int y, int z) const noexcept { return data_[c * voxels() + shape_.index(x, y, z)]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  Grid<T> channel_grid(int c) const {
    auto ch = channel(c);
    return Grid<T>(shape_, std::vector<T>(ch.begin(), ch.end()));
  }
  void set_channel(int c, const Grid<T>& g) {
    if (g.shape() != shape_) throw Error(ErrorCode::ShapeMismatch, "channel shape " + g.shape().str());
    std::copy(g.begin(), g.end(), channel(c).begin());
  }

  friend bool operator==(const MultiGrid&, const MultiGrid&) = default;

 private:
  int channels_ = 0;
  Shape3 shape_{};
  std::vector<T> data_;
};

inline std::size_t count_on(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m) n += v != 0;
  return n;
}

template <class A, class B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* what) {
  if (a.shape() != b.shape())
    throw Error(ErrorCode::ShapeMismatch,
                std::string(what) + ": " + a.shape().str() + " vs " + b.shape().str());
}

}  // namespace pedseg
