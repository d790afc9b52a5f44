#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "pedseg/augmentation.hpp"
#include "pedseg/error.hpp"
#include "pedseg/inference.hpp"
#include "pedseg/metrics.hpp"
#include "pedseg/nn/architecture.hpp"
#include "pedseg/postprocess.hpp"
#include "pedseg/training.hpp"
#include "pedseg/volume_io.hpp"

namespace pedseg {

/// Replaces ${NAME} and ${NAME:-fallback} inside every string value.
inline std::string interpolate_env(const std::string& s) {
  std::string out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto open = s.find("${", i);
    if (open == std::string::npos) {
      out += s.substr(i);
      break;
    }
    out += s.substr(i, open - i);
    const auto close = s.find('}', open);
    if (close == std::string::npos) throw Error(ErrorCode::InvalidConfig, "unterminated ${ in '" + s + "'");
    std::string name = s.substr(open + 2, close - open - 2);
    std::optional<std::string> fallback;
    if (const auto d = name.find(":-"); d != std::string::npos) {
      fallback = name.substr(d + 2);
      name = name.substr(0, d);
    }
    const char* v = std::getenv(name.c_str());
    if (v != nullptr && *v != '\0') out += v;
    else if (fallback) out += *fallback;
    else throw Error(ErrorCode::InvalidConfig, "environment variable '" + name + "' is not set");
    i = close + 1;
  }
  return out;
}

inline void interpolate_env(nlohmann::json& j) {
  if (j.is_string()) j = interpolate_env(j.get<std::string>());
  else if (j.is_structured())
    for (auto& v : j) interpolate_env(v);
}

/// Sets a dotted key (`train.max_steps=5`). The value is parsed as JSON and
/// taken as a plain string when that fails.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw Error(ErrorCode::InvalidConfig, "override '" + assignment + "' must look like key.path=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &j;
  std::stringstream ss(path);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(ss, key, '.')) keys.push_back(key);
  for (std::size_t k = 0; k + 1 < keys.size(); ++k) {
    if (!node->is_object()) throw Error(ErrorCode::InvalidConfig, "override path '" + path + "' crosses a non-object");
    node = &(*node)[keys[k]];
    if (node->is_null()) *node = nlohmann::json::object();
  }
  (*node)[keys.back()] = value;
}

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";
  std::optional<std::filesystem::path> manifest;
  RegionMapping region_mapping;
  TrainConfig train;
  SlidingWindowConfig inference;
  std::optional<EnsembleConfig> ensemble;
  post::PostprocConfig postprocess;
  metrics::MetricsConfig metrics;
  nlohmann::json resolved;  // after interpolation and overrides
};

namespace detail {

inline void allow_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "'" + where + "' must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.contains(k)) throw Error(ErrorCode::InvalidConfig, "unknown key '" + k + "' in " + where);
}

inline Shape3 shape_from_json(const nlohmann::json& j, const std::string& where) {
  if (j.is_number_integer()) {
    const int n = j.get<int>();
    return {n, n, n};
  }
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::InvalidConfig, where + " must be an integer or [x, y, z]");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

inline nn::ArchitectureSpec model_from_json(const nlohmann::json& j) {
  allow_keys(j, {"variant", "base_channels", "depth", "dropout_rate", "kernel_size", "convs_per_block", "activation",
                 "attention_gates", "in_channels", "out_channels"},
             "model");
  auto s = nn::spec_for_variant(j.value("variant", std::string("unet3d")));
  s.base_channels = j.value("base_channels", s.base_channels);
  s.depth = j.value("depth", s.depth);
  s.dropout_rate = j.value("dropout_rate", s.dropout_rate);
  s.kernel_size = j.value("kernel_size", s.kernel_size);
  s.convs_per_block = j.value("convs_per_block", s.convs_per_block);
  s.attention_gates = j.value("attention_gates", s.attention_gates);
  s.in_channels = j.value("in_channels", s.in_channels);
  s.out_channels = j.value("out_channels", s.out_channels);
  if (j.contains("activation")) {
    const auto a = j["activation"].get<std::string>();
    if (a == "relu") s.activation = nn::Activation::ReLU;
    else if (a == "gelu") s.activation = nn::Activation::GELU;
    else throw Error(ErrorCode::InvalidConfig, "activation must be 'relu' or 'gelu'");
  }
  if (s.in_channels != kModalities || s.out_channels != kRegions)
    throw Error(ErrorCode::InvalidConfig, "model must map 4 modalities to 3 region channels");
  s.validate();
  return s;
}

inline nn::OptimizerConfig optimizer_from_json(const nlohmann::json& j) {
  allow_keys(j, {"kind", "learning_rate", "weight_decay", "beta1", "beta2", "eps"}, "train.optimizer");
  nn::OptimizerConfig o;
  o.kind = j.value("kind", o.kind);
  o.learning_rate = j.value("learning_rate", o.learning_rate);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.beta1 = j.value("beta1", o.beta1);
  o.beta2 = j.value("beta2", o.beta2);
  o.eps = j.value("eps", o.eps);
  o.validate();
  return o;
}

inline PipelineConfig parse_pipeline(const nlohmann::json& root, const std::filesystem::path& base_dir) {
  allow_keys(root, {"seed", "output", "data", "model", "loss", "augmentation", "train", "inference", "ensemble",
                    "postprocess", "metrics"},
             "config");
  PipelineConfig c;
  c.resolved = root;
  c.seed = root.value("seed", std::uint64_t{0});
  if (root.contains("output")) c.output_dir = root["output"].get<std::string>();

  if (!root.contains("data")) throw Error(ErrorCode::InvalidConfig, "config needs a 'data' section");
  const auto& data = root["data"];
  allow_keys(data, {"manifest", "region_mapping"}, "data");
  if (data.contains("manifest")) {
    std::filesystem::path m = data["manifest"].get<std::string>();
    c.manifest = m.is_relative() ? base_dir / m : m;
  }
  if (!data.contains("region_mapping"))
    throw Error(ErrorCode::InvalidConfig, "data.region_mapping is required; label conventions differ between releases");
  c.region_mapping = data["region_mapping"].get<RegionMapping>();

  TrainConfig& t = c.train;
  t.seed = c.seed;
  t.region_mapping = c.region_mapping;
  if (root.contains("model")) t.spec = model_from_json(root["model"]);
  if (root.contains("loss")) t.loss = loss::loss_config_from_json(root["loss"]);
  t.augmentation = aug::policy_from_json(root.value("augmentation", nlohmann::json::object()), c.seed);
  if (root.contains("train")) {
    const auto& tj = root["train"];
    allow_keys(tj, {"batch_size", "max_epochs", "steps_per_epoch", "max_steps", "patch", "foreground_fraction",
                    "validation_interval", "early_stop_patience", "validation_threshold", "validation_overlap",
                    "optimizer"},
               "train");
    t.batch_size = tj.value("batch_size", t.batch_size);
    t.max_epochs = tj.value("max_epochs", t.max_epochs);
    t.steps_per_epoch = tj.value("steps_per_epoch", t.steps_per_epoch);
    t.max_steps = tj.value("max_steps", t.max_steps);
    if (tj.contains("patch")) t.patch = shape_from_json(tj["patch"], "train.patch");
    t.foreground_fraction = tj.value("foreground_fraction", t.foreground_fraction);
    t.validation_interval = tj.value("validation_interval", t.validation_interval);
    t.early_stop_patience = tj.value("early_stop_patience", t.early_stop_patience);
    t.validation_threshold = tj.value("validation_threshold", t.validation_threshold);
    t.validation_overlap = tj.value("validation_overlap", t.validation_overlap);
    if (tj.contains("optimizer")) t.optimizer = optimizer_from_json(tj["optimizer"]);
  }
  t.validate();

  c.inference.patch = t.patch;
  if (root.contains("inference")) {
    const auto& ij = root["inference"];
    allow_keys(ij, {"patch", "overlap", "gaussian", "sigma_scale"}, "inference");
    if (ij.contains("patch")) c.inference.patch = shape_from_json(ij["patch"], "inference.patch");
    c.inference.overlap = ij.value("overlap", c.inference.overlap);
    c.inference.gaussian = ij.value("gaussian", c.inference.gaussian);
    c.inference.sigma_scale = ij.value("sigma_scale", c.inference.sigma_scale);
  }
  c.inference.validate();

  if (root.contains("ensemble")) c.ensemble = ensemble_config_from_json(root["ensemble"], base_dir);
  if (root.contains("postprocess")) c.postprocess = post::postproc_config_from_json(root["postprocess"]);
  if (root.contains("metrics")) c.metrics = metrics::metrics_config_from_json(root["metrics"]);
  return c;
}

}  // namespace detail

/// Validates a config document against the schema. Every failure, including
/// wrongly typed values, surfaces as InvalidConfig.
inline PipelineConfig parse_pipeline_config(nlohmann::json root, const std::filesystem::path& base_dir = {},
                                            const std::vector<std::string>& overrides = {}) {
  try {
    interpolate_env(root);
    for (const auto& o : overrides) apply_override(root, o);
    return detail::parse_pipeline(root, base_dir);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("config: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidConfig) throw;
    throw Error(ErrorCode::InvalidConfig, std::string("config: ") + e.what());
  }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
}

}  // namespace pedseg
