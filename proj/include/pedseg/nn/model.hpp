#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pedseg/error.hpp"
#include "pedseg/nn/architecture.hpp"
#include "pedseg/nn/ops.hpp"

namespace pedseg::nn {

struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<float> value;
  std::vector<float> grad;

  std::size_t size() const noexcept { return value.size(); }
};

namespace detail {

struct ConvLayer {
  std::size_t weight = 0;
  std::optional<std::size_t> bias;
  int in = 0, out = 0, k = 1;
};

struct NormLayer {
  std::size_t gamma = 0, beta = 0;
};

struct ConvUnit {
  ConvLayer conv;
  std::optional<NormLayer> norm;
};

struct Block {
  std::vector<ConvUnit> units;
};

struct UpLayer {
  std::size_t weight = 0, bias = 0;
  int in = 0, out = 0;
};

struct Gate {
  ConvLayer wx, wg, psi;
};

struct UnitCache {
  Tensor input;
  NormCache norm;
  Tensor pre_activation;
};

struct BlockCache {
  std::vector<UnitCache> units;
  std::vector<float> dropout_mask;
};

struct GateCache {
  Tensor skip, gating, hidden_pre, psi;
};

struct Tape {
  std::vector<BlockCache> enc;
  std::vector<std::vector<std::uint8_t>> pool_argmax;
  std::vector<Shape3> pool_in_shape;
  std::vector<Tensor> up_input;
  std::vector<GateCache> gates;
  std::vector<BlockCache> dec;
  Tensor final_input;
  std::vector<int> final_split;  // channel widths composing final_input
};

}  // namespace detail

/// A constructed encoder-decoder network: parameters plus the wiring implied
/// by its ArchitectureSpec. Eval-mode `forward` is const and may run
/// concurrently; `forward_train` records activations for `backward`.
class Model {
 public:
  Model() = default;

  Model(const ArchitectureSpec& spec, std::uint64_t init_seed) : spec_(spec) {
    spec_.validate();
    build();
    initialize(init_seed);
  }

  const ArchitectureSpec& spec() const noexcept { return spec_; }
  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  /// Width of the tensor feeding the final 1x1x1 output convolution.
  int output_conv_in_channels() const noexcept { return out_.in; }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0f);
  }

  void check_input(const Tensor& x) const {
    if (x.channels() != spec_.in_channels)
      throw Error(ErrorCode::ShapeMismatch, "model expects " + std::to_string(spec_.in_channels) +
                                                " input channels, got " + std::to_string(x.channels()));
    const int d = spec_.divisor();
    const Shape3 s = x.shape();
    if (s.nx % d || s.ny % d || s.nz % d || s.voxels() == 0)
      throw Error(ErrorCode::IndivisibleShape,
                  "input " + s.str() + " is not divisible by " + std::to_string(d) + " along every axis");
  }

  /// Logits with the input's spatial shape. Dropout is active only in train
  /// mode, driven by `dropout_seed`.
  Tensor forward(const Tensor& x, bool train_mode = false, std::uint64_t dropout_seed = 0) const {
    return run(x, train_mode, dropout_seed, nullptr);
  }

  Tensor forward_train(const Tensor& x, std::uint64_t dropout_seed, bool train_mode = true) {
    tape_ = detail::Tape{};
    return run(x, train_mode, dropout_seed, &tape_);
  }

  /// Accumulates parameter gradients for the last forward_train call.
  void backward(const Tensor& grad_logits);

 private:
  ArchitectureSpec spec_;
  std::vector<Parameter> params_;
  std::vector<detail::Block> enc_, dec_;
  std::vector<detail::UpLayer> up_;
  std::vector<detail::Gate> gates_;
  detail::ConvLayer out_;
  detail::Tape tape_;

  std::size_t add_param(std::string name, std::vector<int> shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    params_.push_back({std::move(name), std::move(shape), std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f)});
    return params_.size() - 1;
  }

  detail::ConvLayer make_conv(const std::string& name, int in, int out, int k, bool bias) {
    detail::ConvLayer c;
    c.in = in;
    c.out = out;
    c.k = k;
    c.weight = add_param(name + ".weight", {out, in, k, k, k});
    if (bias) c.bias = add_param(name + ".bias", {out});
    return c;
  }

  detail::Block make_block(const std::string& name, int in, int out) {
    detail::Block b;
    for (int i = 0; i < spec_.convs_per_block; ++i) {
      detail::ConvUnit u;
      const std::string unit = name + ".conv" + std::to_string(i);
      // Convolutions feeding a normalization carry no bias: it would cancel.
      u.conv = make_conv(unit, i == 0 ? in : out, out, spec_.kernel_size, !spec_.instance_norm);
      if (spec_.instance_norm) {
        detail::NormLayer n;
        n.gamma = add_param(unit + ".norm.gamma", {out});
        n.beta = add_param(unit + ".norm.beta", {out});
        u.norm = n;
      }
      b.units.push_back(u);
    }
    return b;
  }

  int level_channels(int level) const { return spec_.base_channels << level; }

  void build() {
    const int depth = spec_.depth;
    for (int l = 0; l < depth; ++l)
      enc_.push_back(make_block("enc" + std::to_string(l), l == 0 ? spec_.in_channels : level_channels(l - 1),
                                level_channels(l)));
    up_.resize(depth > 1 ? depth - 1 : 0);
    dec_.resize(up_.size());
    if (spec_.attention_gates) gates_.resize(up_.size());
    for (int l = depth - 2; l >= 0; --l) {
      const int c = level_channels(l);
      const std::string lvl = std::to_string(l);
      detail::UpLayer u;
      u.in = 2 * c;
      u.out = c;
      u.weight = add_param("up" + lvl + ".weight", {2 * c, c, 2, 2, 2});
      u.bias = add_param("up" + lvl + ".bias", {c});
      up_[l] = u;
      if (spec_.attention_gates) {
        const int inter = std::max(1, c / 2);
        detail::Gate g;
        g.wx = make_conv("gate" + lvl + ".wx", c, inter, 1, true);
        g.wg = make_conv("gate" + lvl + ".wg", c, inter, 1, true);
        g.psi = make_conv("gate" + lvl + ".psi", inter, 1, 1, true);
        gates_[l] = g;
      }
      dec_[l] = make_block("dec" + lvl, 2 * c, c);
    }
    int final_in = spec_.base_channels;
    if (spec_.family == Family::ONet3D)
      for (int l = 0; l < depth; ++l) final_in += level_channels(l);
    out_ = make_conv("out", final_in, spec_.out_channels, 1, true);
  }

  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& p : params_) {
      const bool is_bias = p.name.ends_with(".bias") || p.name.ends_with(".beta");
      if (p.name.ends_with(".gamma")) {
        std::fill(p.value.begin(), p.value.end(), 1.0f);
        continue;
      }
      if (is_bias) continue;
      // He-normal over the fan-in seen by one output element.
      int fan_in = 1;
      if (p.name.rfind("up", 0) == 0) fan_in = p.shape[0];
      else fan_in = p.shape[1] * p.shape[2] * p.shape[3] * p.shape[4];
      const bool linear_head = p.name.rfind("out.", 0) == 0 || p.name.find(".psi.") != std::string::npos;
      const double stddev = std::sqrt((linear_head ? 1.0 : 2.0) / fan_in);
      std::normal_distribution<double> nd(0.0, stddev);
      for (auto& v : p.value) v = static_cast<float>(nd(rng));
    }
  }

  std::span<const float> w(std::size_t i) const { return params_[i].value; }
  std::span<float> g(std::size_t i) { return params_[i].grad; }

  Tensor conv(const detail::ConvLayer& c, const Tensor& x) const {
    return conv3d(x, w(c.weight), c.bias ? params_[*c.bias].value.data() : nullptr, c.out, c.k);
  }

  Tensor conv_backward(const detail::ConvLayer& c, const Tensor& x, const Tensor& grad, bool need_input) {
    return conv3d_backward(x, w(c.weight), grad, c.k, g(c.weight), c.bias ? params_[*c.bias].grad.data() : nullptr,
                           need_input);
  }

  Tensor run_block(const detail::Block& b, Tensor x, bool train, std::mt19937_64& drop_rng,
                   detail::BlockCache* cache) const {
    if (cache) cache->units.resize(b.units.size());
    for (std::size_t i = 0; i < b.units.size(); ++i) {
      const auto& u = b.units[i];
      Tensor y = conv(u.conv, x);
      if (u.norm) y = instance_norm(y, w(u.norm->gamma), w(u.norm->beta), cache ? &cache->units[i].norm : nullptr);
      if (cache) {
        cache->units[i].input = std::move(x);
        cache->units[i].pre_activation = y;
      }
      activate_inplace(y, spec_.activation);
      x = std::move(y);
    }
    if (train && spec_.dropout_rate > 0.0) {
      const float keep = static_cast<float>(1.0 - spec_.dropout_rate);
      std::uniform_real_distribution<float> u01(0.0f, 1.0f);
      std::vector<float> mask(x.size());
      for (auto& m : mask) m = u01(drop_rng) < keep ? 1.0f / keep : 0.0f;
      auto& d = x.storage();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= mask[i];
      if (cache) cache->dropout_mask = std::move(mask);
    }
    return x;
  }

  Tensor block_backward(const detail::Block& b, detail::BlockCache& cache, Tensor grad, bool need_input) {
    if (!cache.dropout_mask.empty()) {
      auto& d = grad.storage();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= cache.dropout_mask[i];
    }
    for (std::size_t i = b.units.size(); i-- > 0;) {
      const auto& u = b.units[i];
      auto& uc = cache.units[i];
      activation_backward_inplace(uc.pre_activation, grad, spec_.activation);
      if (u.norm) grad = instance_norm_backward(uc.norm, w(u.norm->gamma), grad, g(u.norm->gamma), g(u.norm->beta));
      grad = conv_backward(u.conv, uc.input, grad, need_input || i > 0);
    }
    return grad;
  }

  Tensor run_gate(const detail::Gate& gt, const Tensor& skip, const Tensor& gating, detail::GateCache* cache) const {
    Tensor hidden = conv(gt.wx, skip);
    add_inplace(hidden, conv(gt.wg, gating));
    if (cache) cache->hidden_pre = hidden;
    activate_inplace(hidden, Activation::ReLU);
    Tensor psi = conv(gt.psi, hidden);
    for (auto& v : psi.storage()) v = sigmoid(v);
    Tensor out(skip.channels(), skip.shape());
    const auto p = psi.channel(0);
    for (int c = 0; c < skip.channels(); ++c) {
      auto src = skip.channel(c);
      auto dst = out.channel(c);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] * p[i];
    }
    if (cache) {
      cache->skip = skip;
      cache->gating = gating;
      cache->psi = std::move(psi);
    }
    return out;
  }

  // Returns {grad wrt skip, grad wrt gating}.
  std::pair<Tensor, Tensor> gate_backward(const detail::Gate& gt, detail::GateCache& cache, const Tensor& grad) {
    const auto p = cache.psi.channel(0);
    Tensor grad_skip(grad.channels(), grad.shape());
    Tensor grad_psi(1, grad.shape(), 0.0f);
    auto gp = grad_psi.channel(0);
    for (int c = 0; c < grad.channels(); ++c) {
      auto gsrc = grad.channel(c);
      auto xs = cache.skip.channel(c);
      auto gs = grad_skip.channel(c);
      for (std::size_t i = 0; i < gsrc.size(); ++i) {
        gs[i] = gsrc[i] * p[i];
        gp[i] += gsrc[i] * xs[i];
      }
    }
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] *= p[i] * (1.0f - p[i]);
    Tensor hidden = cache.hidden_pre;
    activate_inplace(hidden, Activation::ReLU);
    Tensor grad_hidden = conv_backward(gt.psi, hidden, grad_psi, true);
    activation_backward_inplace(cache.hidden_pre, grad_hidden, Activation::ReLU);
    add_inplace(grad_skip, conv_backward(gt.wx, cache.skip, grad_hidden, true));
    Tensor grad_gating = conv_backward(gt.wg, cache.gating, grad_hidden, true);
    return {std::move(grad_skip), std::move(grad_gating)};
  }

  Tensor run(const Tensor& input, bool train, std::uint64_t dropout_seed, detail::Tape* tape) const {
    check_input(input);
    const int depth = spec_.depth;
    std::mt19937_64 drop_rng(dropout_seed);
    if (tape) {
      tape->enc.resize(depth);
      tape->dec.resize(dec_.size());
      tape->pool_argmax.resize(depth);
      tape->pool_in_shape.resize(depth);
      tape->up_input.resize(up_.size());
      tape->gates.resize(gates_.size());
    }
    std::vector<Tensor> skips(depth);
    skips[0] = run_block(enc_[0], input, train, drop_rng, tape ? &tape->enc[0] : nullptr);
    for (int l = 1; l < depth; ++l) {
      Tensor pooled = max_pool2(skips[l - 1], tape ? &tape->pool_argmax[l] : nullptr);
      if (tape) tape->pool_in_shape[l] = skips[l - 1].shape();
      skips[l] = run_block(enc_[l], std::move(pooled), train, drop_rng, tape ? &tape->enc[l] : nullptr);
    }
    Tensor d = skips[depth - 1];
    for (int l = depth - 2; l >= 0; --l) {
      const auto& u = up_[l];
      Tensor up = conv_transpose2(d, w(u.weight), w(u.bias), u.out);
      if (tape) tape->up_input[l] = std::move(d);
      Tensor skip = spec_.attention_gates ? run_gate(gates_[l], skips[l], up, tape ? &tape->gates[l] : nullptr)
                                          : skips[l];
      Tensor cat = concat_channels({&skip, &up});
      d = run_block(dec_[l], std::move(cat), train, drop_rng, tape ? &tape->dec[l] : nullptr);
    }
    Tensor final_in;
    std::vector<int> split{d.channels()};
    if (spec_.family == Family::ONet3D) {
      std::vector<Tensor> ups;
      ups.reserve(depth);
      for (int l = 0; l < depth; ++l) {
        ups.push_back(upsample_nearest(skips[l], 1 << l));
        split.push_back(ups.back().channels());
      }
      std::vector<const Tensor*> parts{&d};
      for (const auto& t : ups) parts.push_back(&t);
      final_in = concat_channels(parts);
    } else {
      final_in = std::move(d);
    }
    Tensor logits = conv(out_, final_in);
    if (tape) {
      tape->final_input = std::move(final_in);
      tape->final_split = std::move(split);
    }
    return logits;
  }
};

inline void Model::backward(const Tensor& grad_logits) {
  auto& tape = tape_;
  if (tape.enc.empty()) throw Error(ErrorCode::InvalidSpec, "backward called without a recorded forward pass");
  const int depth = spec_.depth;
  Tensor grad_final = conv_backward(out_, tape.final_input, grad_logits, true);
  std::vector<Tensor> grad_skip(depth);
  Tensor grad_d;
  if (spec_.family == Family::ONet3D) {
    int offset = 0;
    grad_d = slice_channels(grad_final, 0, tape.final_split[0]);
    offset = tape.final_split[0];
    for (int l = 0; l < depth; ++l) {
      Tensor part = slice_channels(grad_final, offset, tape.final_split[l + 1]);
      offset += tape.final_split[l + 1];
      grad_skip[l] = upsample_nearest_backward(part, 1 << l);
    }
  } else {
    grad_d = std::move(grad_final);
  }
  auto accumulate = [](Tensor& dst, Tensor src) {
    if (dst.size() == 0) dst = std::move(src);
    else add_inplace(dst, src);
  };
  for (int l = 0; l <= depth - 2; ++l) {
    Tensor grad_cat = block_backward(dec_[l], tape.dec[l], std::move(grad_d), true);
    const int c = up_[l].out;
    Tensor grad_s = slice_channels(grad_cat, 0, c);
    Tensor grad_up = slice_channels(grad_cat, c, c);
    if (spec_.attention_gates) {
      auto [gs, gg] = gate_backward(gates_[l], tape.gates[l], grad_s);
      accumulate(grad_skip[l], std::move(gs));
      add_inplace(grad_up, gg);
    } else {
      accumulate(grad_skip[l], std::move(grad_s));
    }
    const auto& u = up_[l];
    grad_d = conv_transpose2_backward(tape.up_input[l], w(u.weight), grad_up, g(u.weight), g(u.bias));
  }
  accumulate(grad_skip[depth - 1], std::move(grad_d));
  for (int l = depth - 1; l >= 1; --l) {
    Tensor gin = block_backward(enc_[l], tape.enc[l], std::move(grad_skip[l]), true);
    accumulate(grad_skip[l - 1], max_pool2_backward(tape.pool_argmax[l], gin, tape.pool_in_shape[l]));
  }
  block_backward(enc_[0], tape.enc[0], std::move(grad_skip[0]), false);
}

/// Builds a freshly initialized model; identical (spec, seed) give identical
/// parameters.
inline Model build_model(const ArchitectureSpec& spec, std::uint64_t init_seed) { return Model(spec, init_seed); }

}  // namespace pedseg::nn
