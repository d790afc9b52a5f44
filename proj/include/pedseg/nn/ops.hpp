#pragma once

// Forward/backward kernels for single-sample 3D feature maps. A Tensor is a
// channel-major MultiGrid<float>; batch handling lives in the trainer.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "pedseg/error.hpp"
#include "pedseg/grid.hpp"

namespace pedseg::nn {

using Tensor = MultiGrid<float>;

namespace detail {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstMatMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// Bounds the im2col scratch buffer (floats) by splitting the volume into z-slabs.
inline constexpr std::size_t kColumnBudget = std::size_t{1} << 23;

inline int slab_depth(const Shape3& s, std::size_t rows) {
  const std::size_t plane = static_cast<std::size_t>(s.nx) * s.ny;
  const std::size_t per_z = std::max<std::size_t>(1, rows * plane);
  return static_cast<int>(std::clamp<std::size_t>(kColumnBudget / per_z, 1, static_cast<std::size_t>(s.nz)));
}

inline void im2col(const Tensor& in, int k, int z0, int z1, RowMat& col) {
  const Shape3 s = in.shape();
  const int pad = k / 2;
  const int k3 = k * k * k;
  const std::size_t plane = static_cast<std::size_t>(s.nx) * s.ny;
  const std::size_t ncols = plane * (z1 - z0);
  col.resize(static_cast<Eigen::Index>(in.channels()) * k3, static_cast<Eigen::Index>(ncols));
  for (int c = 0; c < in.channels(); ++c) {
    const float* src = in.channel(c).data();
    for (int dz = 0; dz < k; ++dz)
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx) {
          float* row = col.row((static_cast<Eigen::Index>(c) * k + dz) * k * k + dy * k + dx).data();
          const int ox = dx - pad;
          const int x_lo = std::max(0, -ox), x_hi = std::min(s.nx, s.nx - ox);
          for (int z = z0; z < z1; ++z) {
            const int sz = z + dz - pad;
            for (int y = 0; y < s.ny; ++y) {
              float* dst = row + (static_cast<std::size_t>(z - z0) * s.ny + y) * s.nx;
              const int sy = y + dy - pad;
              if (sz < 0 || sz >= s.nz || sy < 0 || sy >= s.ny || x_lo >= x_hi) {
                std::fill(dst, dst + s.nx, 0.0f);
                continue;
              }
              std::fill(dst, dst + x_lo, 0.0f);
              std::memcpy(dst + x_lo, src + s.index(x_lo + ox, sy, sz), sizeof(float) * (x_hi - x_lo));
              std::fill(dst + x_hi, dst + s.nx, 0.0f);
            }
          }
        }
  }
}

inline void col2im(const RowMat& col, int k, int z0, int z1, Tensor& grad_in) {
  const Shape3 s = grad_in.shape();
  const int pad = k / 2;
  for (int c = 0; c < grad_in.channels(); ++c) {
    float* dst = grad_in.channel(c).data();
    for (int dz = 0; dz < k; ++dz)
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx) {
          const float* row = col.row((static_cast<Eigen::Index>(c) * k + dz) * k * k + dy * k + dx).data();
          const int ox = dx - pad;
          const int x_lo = std::max(0, -ox), x_hi = std::min(s.nx, s.nx - ox);
          for (int z = z0; z < z1; ++z) {
            const int sz = z + dz - pad;
            if (sz < 0 || sz >= s.nz) continue;
            for (int y = 0; y < s.ny; ++y) {
              const int sy = y + dy - pad;
              if (sy < 0 || sy >= s.ny) continue;
              const float* src = row + (static_cast<std::size_t>(z - z0) * s.ny + y) * s.nx;
              float* out = dst + s.index(0, sy, sz) + ox;
              for (int x = x_lo; x < x_hi; ++x) out[x] += src[x];
            }
          }
        }
  }
}

}  // namespace detail

/// Stride-1 convolution with zero "same" padding; weights are
/// [out][in][kz][ky][kx], bias optional (nullptr).
inline Tensor conv3d(const Tensor& in, std::span<const float> weight, const float* bias, int out_channels, int k) {
  const Shape3 s = in.shape();
  const std::size_t n = s.voxels();
  const auto rows = static_cast<Eigen::Index>(in.channels()) * k * k * k;
  Tensor out(out_channels, s);
  Eigen::Map<const detail::RowMat> w(weight.data(), out_channels, rows);
  const std::size_t plane = static_cast<std::size_t>(s.nx) * s.ny;
  if (k == 1) {
    detail::ConstMatMap x(in.data(), in.channels(), static_cast<Eigen::Index>(n), Eigen::OuterStride<>(n));
    detail::MatMap y(out.data(), out_channels, static_cast<Eigen::Index>(n), Eigen::OuterStride<>(n));
    y.noalias() = w * x;
  } else {
    const int dz = detail::slab_depth(s, static_cast<std::size_t>(rows));
    detail::RowMat col;
    for (int z0 = 0; z0 < s.nz; z0 += dz) {
      const int z1 = std::min(s.nz, z0 + dz);
      detail::im2col(in, k, z0, z1, col);
      detail::MatMap y(out.data() + z0 * plane, out_channels, col.cols(), Eigen::OuterStride<>(n));
      y.noalias() = w * col;
    }
  }
  if (bias)
    for (int c = 0; c < out_channels; ++c) {
      const float b = bias[c];
      for (auto& v : out.channel(c)) v += b;
    }
  return out;
}

/// Accumulates weight/bias gradients and returns the input gradient (empty
/// tensor when `need_input_grad` is false).
inline Tensor conv3d_backward(const Tensor& in, std::span<const float> weight, const Tensor& grad_out, int k,
                              std::span<float> grad_weight, float* grad_bias, bool need_input_grad) {
  const Shape3 s = in.shape();
  const std::size_t n = s.voxels();
  const int cout = grad_out.channels();
  const auto rows = static_cast<Eigen::Index>(in.channels()) * k * k * k;
  Eigen::Map<const detail::RowMat> w(weight.data(), cout, rows);
  Eigen::Map<detail::RowMat> gw(grad_weight.data(), cout, rows);
  Tensor grad_in;
  if (need_input_grad) grad_in = Tensor(in.channels(), s, 0.0f);
  const std::size_t plane = static_cast<std::size_t>(s.nx) * s.ny;

  if (grad_bias)
    for (int c = 0; c < cout; ++c) {
      double acc = 0.0;
      for (float v : grad_out.channel(c)) acc += v;
      grad_bias[c] += static_cast<float>(acc);
    }

  if (k == 1) {
    detail::ConstMatMap x(in.data(), in.channels(), static_cast<Eigen::Index>(n), Eigen::OuterStride<>(n));
    detail::ConstMatMap g(grad_out.data(), cout, static_cast<Eigen::Index>(n), Eigen::OuterStride<>(n));
    gw.noalias() += g * x.transpose();
    if (need_input_grad) {
      detail::MatMap gi(grad_in.data(), in.channels(), static_cast<Eigen::Index>(n), Eigen::OuterStride<>(n));
      gi.noalias() = w.transpose() * g;
    }
    return grad_in;
  }
  const int dz = detail::slab_depth(s, static_cast<std::size_t>(rows));
  detail::RowMat col, gcol;
  for (int z0 = 0; z0 < s.nz; z0 += dz) {
    const int z1 = std::min(s.nz, z0 + dz);
    detail::im2col(in, k, z0, z1, col);
    detail::ConstMatMap g(grad_out.data() + z0 * plane, cout, col.cols(), Eigen::OuterStride<>(n));
    gw.noalias() += g * col.transpose();
    if (need_input_grad) {
      gcol.noalias() = w.transpose() * g;
      detail::col2im(gcol, k, z0, z1, grad_in);
    }
  }
  return grad_in;
}

/// 2x2x2 stride-2 transposed convolution; weights are [in][out][2][2][2].
inline Tensor conv_transpose2(const Tensor& in, std::span<const float> weight, std::span<const float> bias,
                              int out_channels) {
  const Shape3 s = in.shape();
  const Shape3 so{2 * s.nx, 2 * s.ny, 2 * s.nz};
  const std::size_t n = s.voxels();
  Eigen::Map<const detail::RowMat> w(weight.data(), in.channels(), out_channels * 8);
  detail::ConstMatMap x(in.data(), in.channels(), static_cast<Eigen::Index>(n), Eigen::OuterStride<>(n));
  detail::RowMat pre = w.transpose() * x;
  Tensor out(out_channels, so);
  for (int c = 0; c < out_channels; ++c) {
    float* dst = out.channel(c).data();
    for (int o = 0; o < 8; ++o) {
      const int ox = o & 1, oy = (o >> 1) & 1, oz = (o >> 2) & 1;
      const float* src = pre.row(c * 8 + o).data();
      for (int z = 0; z < s.nz; ++z)
        for (int y = 0; y < s.ny; ++y)
          for (int xx = 0; xx < s.nx; ++xx)
            dst[so.index(2 * xx + ox, 2 * y + oy, 2 * z + oz)] = src[s.index(xx, y, z)] + bias[c];
    }
  }
  return out;
}

inline Tensor conv_transpose2_backward(const Tensor& in, std::span<const float> weight, const Tensor& grad_out,
                                       std::span<float> grad_weight, std::span<float> grad_bias) {
  const Shape3 s = in.shape();
  const Shape3 so = grad_out.shape();
  const int cout = grad_out.channels();
  const std::size_t n = s.voxels();
  detail::RowMat gpre(cout * 8, static_cast<Eigen::Index>(n));
  for (int c = 0; c < cout; ++c) {
    const float* src = grad_out.channel(c).data();
    double acc = 0.0;
    for (float v : grad_out.channel(c)) acc += v;
    grad_bias[c] += static_cast<float>(acc);
    for (int o = 0; o < 8; ++o) {
      const int ox = o & 1, oy = (o >> 1) & 1, oz = (o >> 2) & 1;
      float* dst = gpre.row(c * 8 + o).data();
      for (int z = 0; z < s.nz; ++z)
        for (int y = 0; y < s.ny; ++y)
          for (int xx = 0; xx < s.nx; ++xx) dst[s.index(xx, y, z)] = src[so.index(2 * xx + ox, 2 * y + oy, 2 * z + oz)];
    }
  }
  Eigen::Map<const detail::RowMat> w(weight.data(), in.channels(), cout * 8);
  Eigen::Map<detail::RowMat> gw(grad_weight.data(), in.channels(), cout * 8);
  detail::ConstMatMap x(in.data(), in.channels(), static_cast<Eigen::Index>(n), Eigen::OuterStride<>(n));
  gw.noalias() += x * gpre.transpose();
  Tensor grad_in(in.channels(), s);
  detail::MatMap gi(grad_in.data(), in.channels(), static_cast<Eigen::Index>(n), Eigen::OuterStride<>(n));
  gi.noalias() = w * gpre;
  return grad_in;
}

inline constexpr float kNormEps = 1e-5f;

struct NormCache {
  Tensor xhat;
  std::vector<float> inv_std;
};

/// Instance normalization with per-channel affine parameters.
inline Tensor instance_norm(const Tensor& in, std::span<const float> gamma, std::span<const float> beta,
                            NormCache* cache) {
  Tensor out(in.channels(), in.shape());
  if (cache) {
    cache->xhat = Tensor(in.channels(), in.shape());
    cache->inv_std.assign(in.channels(), 0.0f);
  }
  for (int c = 0; c < in.channels(); ++c) {
    auto x = in.channel(c);
    double sum = 0.0;
    for (float v : x) sum += v;
    const double mean = sum / x.size();
    double sq = 0.0;
    for (float v : x) sq += (v - mean) * (v - mean);
    const float inv = static_cast<float>(1.0 / std::sqrt(sq / x.size() + kNormEps));
    auto y = out.channel(c);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const float xh = static_cast<float>(x[i] - mean) * inv;
      if (cache) cache->xhat.channel(c)[i] = xh;
      y[i] = gamma[c] * xh + beta[c];
    }
    if (cache) cache->inv_std[c] = inv;
  }
  return out;
}

inline Tensor instance_norm_backward(const NormCache& cache, std::span<const float> gamma, const Tensor& grad_out,
                                     std::span<float> grad_gamma, std::span<float> grad_beta) {
  Tensor grad_in(grad_out.channels(), grad_out.shape());
  for (int c = 0; c < grad_out.channels(); ++c) {
    auto dy = grad_out.channel(c);
    auto xh = cache.xhat.channel(c);
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t i = 0; i < dy.size(); ++i) {
      sum_dy += dy[i];
      sum_dy_xh += static_cast<double>(dy[i]) * xh[i];
    }
    grad_gamma[c] += static_cast<float>(sum_dy_xh);
    grad_beta[c] += static_cast<float>(sum_dy);
    const double n = static_cast<double>(dy.size());
    const double scale = gamma[c] * cache.inv_std[c] / n;
    auto dx = grad_in.channel(c);
    for (std::size_t i = 0; i < dy.size(); ++i)
      dx[i] = static_cast<float>(scale * (n * dy[i] - sum_dy - xh[i] * sum_dy_xh));
  }
  return grad_in;
}

enum class Activation { ReLU, GELU };

inline constexpr float kInvSqrt2 = static_cast<float>(1.0 / std::numbers::sqrt2);

inline float gelu(float x) { return 0.5f * x * (1.0f + std::erf(x * kInvSqrt2)); }

inline float gelu_grad(float x) {
  const float cdf = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
  const float pdf = std::exp(-0.5f * x * x) * static_cast<float>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

inline void activate_inplace(Tensor& t, Activation a) {
  auto& d = t.storage();
  if (a == Activation::ReLU)
    for (auto& v : d) v = v > 0.0f ? v : 0.0f;
  else
    for (auto& v : d) v = gelu(v);
}

inline void activation_backward_inplace(const Tensor& pre, Tensor& grad, Activation a) {
  auto& g = grad.storage();
  const auto& x = pre.storage();
  if (a == Activation::ReLU)
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = x[i] > 0.0f ? g[i] : 0.0f;
  else
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= gelu_grad(x[i]);
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

/// 2x2x2 max pooling; `argmax` receives the winning offset (0..7) per output.
inline Tensor max_pool2(const Tensor& in, std::vector<std::uint8_t>* argmax) {
  const Shape3 s = in.shape();
  const Shape3 so{s.nx / 2, s.ny / 2, s.nz / 2};
  Tensor out(in.channels(), so);
  if (argmax) argmax->assign(out.size(), 0);
  for (int c = 0; c < in.channels(); ++c) {
    auto src = in.channel(c);
    auto dst = out.channel(c);
    for (int z = 0; z < so.nz; ++z)
      for (int y = 0; y < so.ny; ++y)
        for (int x = 0; x < so.nx; ++x) {
          float best = -std::numeric_limits<float>::infinity();
          std::uint8_t arg = 0;
          for (int o = 0; o < 8; ++o) {
            const float v = src[s.index(2 * x + (o & 1), 2 * y + ((o >> 1) & 1), 2 * z + ((o >> 2) & 1))];
            if (v > best) {
              best = v;
              arg = static_cast<std::uint8_t>(o);
            }
          }
          const std::size_t oi = so.index(x, y, z);
          dst[oi] = best;
          if (argmax) (*argmax)[c * so.voxels() + oi] = arg;
        }
  }
  return out;
}

inline Tensor max_pool2_backward(const std::vector<std::uint8_t>& argmax, const Tensor& grad_out, Shape3 in_shape) {
  const Shape3 so = grad_out.shape();
  Tensor grad_in(grad_out.channels(), in_shape, 0.0f);
  for (int c = 0; c < grad_out.channels(); ++c) {
    auto g = grad_out.channel(c);
    auto dst = grad_in.channel(c);
    for (int z = 0; z < so.nz; ++z)
      for (int y = 0; y < so.ny; ++y)
        for (int x = 0; x < so.nx; ++x) {
          const std::size_t oi = so.index(x, y, z);
          const int o = argmax[c * so.voxels() + oi];
          dst[in_shape.index(2 * x + (o & 1), 2 * y + ((o >> 1) & 1), 2 * z + ((o >> 2) & 1))] += g[oi];
        }
  }
  return grad_in;
}

/// Nearest-neighbour upsampling by an integer factor.
inline Tensor upsample_nearest(const Tensor& in, int factor) {
  if (factor == 1) return in;
  const Shape3 s = in.shape();
  const Shape3 so{s.nx * factor, s.ny * factor, s.nz * factor};
  Tensor out(in.channels(), so);
  for (int c = 0; c < in.channels(); ++c) {
    auto src = in.channel(c);
    auto dst = out.channel(c);
    for (int z = 0; z < so.nz; ++z)
      for (int y = 0; y < so.ny; ++y)
        for (int x = 0; x < so.nx; ++x) dst[so.index(x, y, z)] = src[s.index(x / factor, y / factor, z / factor)];
  }
  return out;
}

inline Tensor upsample_nearest_backward(const Tensor& grad_out, int factor) {
  if (factor == 1) return grad_out;
  const Shape3 so = grad_out.shape();
  const Shape3 s{so.nx / factor, so.ny / factor, so.nz / factor};
  Tensor grad_in(grad_out.channels(), s, 0.0f);
  for (int c = 0; c < grad_out.channels(); ++c) {
    auto g = grad_out.channel(c);
    auto dst = grad_in.channel(c);
    for (int z = 0; z < so.nz; ++z)
      for (int y = 0; y < so.ny; ++y)
        for (int x = 0; x < so.nx; ++x) dst[s.index(x / factor, y / factor, z / factor)] += g[so.index(x, y, z)];
  }
  return grad_in;
}

inline Tensor concat_channels(const std::vector<const Tensor*>& parts) {
  int channels = 0;
  for (const auto* p : parts) {
    if (p->shape() != parts.front()->shape())
      throw Error(ErrorCode::ShapeMismatch, "concat of " + p->shape().str() + " and " + parts.front()->shape().str());
    channels += p->channels();
  }
  Tensor out(channels, parts.front()->shape());
  float* dst = out.data();
  for (const auto* p : parts) dst = std::copy(p->storage().begin(), p->storage().end(), dst);
  return out;
}

inline Tensor slice_channels(const Tensor& t, int begin, int count) {
  Tensor out(count, t.shape());
  const auto* src = t.data() + static_cast<std::size_t>(begin) * t.voxels();
  std::copy(src, src + out.size(), out.data());
  return out;
}

inline void add_inplace(Tensor& a, const Tensor& b) {
  auto& x = a.storage();
  const auto& y = b.storage();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}

}  // namespace pedseg::nn
