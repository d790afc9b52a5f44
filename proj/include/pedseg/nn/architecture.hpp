#pragma once

#include <array>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "pedseg/error.hpp"
#include "pedseg/nn/ops.hpp"

namespace pedseg::nn {

enum class Family { UNet3D, ONet3D };

/// Declarative description of one encoder-decoder variant.
struct ArchitectureSpec {
  Family family = Family::UNet3D;
  int in_channels = 4;
  int out_channels = 3;
  int base_channels = 32;
  int depth = 4;
  int convs_per_block = 2;
  int kernel_size = 3;
  Activation activation = Activation::ReLU;
  bool attention_gates = false;
  double dropout_rate = 0.0;
  bool instance_norm = true;
  std::string variant_name = "unet3d";

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidSpec, m); };
    if (in_channels < 1 || out_channels < 1) fail("channel counts must be positive");
    if (base_channels < 1) fail("base_channels must be positive");
    if (depth < 1 || depth > 8) fail("depth must be in [1, 8]");
    if (convs_per_block != 1 && convs_per_block != 2) fail("convs_per_block must be 1 or 2");
    if (kernel_size < 1 || kernel_size % 2 == 0) fail("kernel_size must be odd and >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must be in [0, 1)");
  }

  /// Spatial extents must be multiples of this.
  int divisor() const noexcept { return 1 << (depth - 1); }

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

inline constexpr std::array<std::string_view, 8> kVariantNames = {
    "unet3d",           "unet3d_gelu",          "unet3d_singleconv",    "unet3d_attention",
    "unet3d_dropout",   "onet3d_singleconv_k1", "onet3d_singleconv_k5", "onet3d_doubleconv_k1",
};

inline constexpr double kDefaultDropout = 0.2;

/// Canonical spec for one of the eight published variants.
inline ArchitectureSpec spec_for_variant(std::string_view name) {
  ArchitectureSpec s;
  s.variant_name = std::string(name);
  if (name == "unet3d") return s;
  if (name == "unet3d_gelu") {
    s.activation = Activation::GELU;
    return s;
  }
  if (name == "unet3d_singleconv") {
    s.convs_per_block = 1;
    return s;
  }
  if (name == "unet3d_attention") {
    s.attention_gates = true;
    return s;
  }
  if (name == "unet3d_dropout") {
    s.dropout_rate = kDefaultDropout;
    return s;
  }
  s.family = Family::ONet3D;
  if (name == "onet3d_singleconv_k1") {
    s.convs_per_block = 1;
    s.kernel_size = 1;
    return s;
  }
  if (name == "onet3d_singleconv_k5") {
    s.convs_per_block = 1;
    s.kernel_size = 5;
    return s;
  }
  if (name == "onet3d_doubleconv_k1") {
    s.convs_per_block = 2;
    s.kernel_size = 1;
    return s;
  }
  throw Error(ErrorCode::UnknownVariant, "unknown model variant '" + std::string(name) + "'");
}

inline void to_json(nlohmann::json& j, const ArchitectureSpec& s) {
  j = nlohmann::json{{"family", s.family == Family::UNet3D ? "UNet3D" : "ONet3D"},
                     {"in_channels", s.in_channels},
                     {"out_channels", s.out_channels},
                     {"base_channels", s.base_channels},
                     {"depth", s.depth},
                     {"convs_per_block", s.convs_per_block},
                     {"kernel_size", s.kernel_size},
                     {"activation", s.activation == Activation::ReLU ? "ReLU" : "GELU"},
                     {"attention_gates", s.attention_gates},
                     {"dropout_rate", s.dropout_rate},
                     {"instance_norm", s.instance_norm},
                     {"variant_name", s.variant_name}};
}

inline void from_json(const nlohmann::json& j, ArchitectureSpec& s) {
  const auto family = j.at("family").get<std::string>();
  if (family != "UNet3D" && family != "ONet3D") throw Error(ErrorCode::InvalidSpec, "unknown family " + family);
  s.family = family == "UNet3D" ? Family::UNet3D : Family::ONet3D;
  j.at("in_channels").get_to(s.in_channels);
  j.at("out_channels").get_to(s.out_channels);
  j.at("base_channels").get_to(s.base_channels);
  j.at("depth").get_to(s.depth);
  j.at("convs_per_block").get_to(s.convs_per_block);
  j.at("kernel_size").get_to(s.kernel_size);
  const auto act = j.at("activation").get<std::string>();
  if (act != "ReLU" && act != "GELU") throw Error(ErrorCode::InvalidSpec, "unknown activation " + act);
  s.activation = act == "ReLU" ? Activation::ReLU : Activation::GELU;
  j.at("attention_gates").get_to(s.attention_gates);
  j.at("dropout_rate").get_to(s.dropout_rate);
  s.instance_norm = j.value("instance_norm", true);
  j.at("variant_name").get_to(s.variant_name);
  s.validate();
}

}  // namespace pedseg::nn
