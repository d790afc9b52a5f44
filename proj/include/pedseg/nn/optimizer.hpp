#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pedseg/error.hpp"
#include "pedseg/nn/model.hpp"

namespace pedseg::nn {

struct OptimizerConfig {
  std::string kind = "adamw";
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (kind != "adamw" && kind != "adam" && kind != "sgd")
      throw Error(ErrorCode::InvalidConfig, "unknown optimizer '" + kind + "'");
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::InvalidConfig, "learning rate must be positive");
    if (weight_decay < 0.0) throw Error(ErrorCode::InvalidConfig, "weight decay must be non-negative");
  }
};

/// Adaptive-moment optimizer. "adamw" decouples weight decay from the
/// moment estimates, "adam" folds it into the gradient, "sgd" is plain SGD.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerConfig cfg, const Model& model) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (const auto& p : model.parameters()) {
      m_.emplace_back(p.size(), 0.0f);
      v_.emplace_back(p.size(), 0.0f);
    }
  }

  const OptimizerConfig& config() const noexcept { return cfg_; }
  std::uint64_t steps() const noexcept { return t_; }
  std::vector<std::vector<float>>& first_moments() noexcept { return m_; }
  std::vector<std::vector<float>>& second_moments() noexcept { return v_; }
  const std::vector<std::vector<float>>& first_moments() const noexcept { return m_; }
  const std::vector<std::vector<float>>& second_moments() const noexcept { return v_; }
  void set_steps(std::uint64_t t) noexcept { t_ = t; }

  void step(Model& model) {
    auto& params = model.parameters();
    if (params.size() != m_.size()) throw Error(ErrorCode::InvalidSpec, "optimizer state does not match model");
    ++t_;
    const double lr = cfg_.learning_rate;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        float grad = p.grad[i];
        if (cfg_.kind == "sgd") {
          p.value[i] -= static_cast<float>(lr * (grad + cfg_.weight_decay * p.value[i]));
          continue;
        }
        if (cfg_.kind == "adam") grad += static_cast<float>(cfg_.weight_decay) * p.value[i];
        m[i] = b1 * m[i] + (1.0f - b1) * grad;
        v[i] = b2 * v[i] + (1.0f - b2) * grad * grad;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double update = lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        if (cfg_.kind == "adamw") update += lr * cfg_.weight_decay * p.value[i];
        p.value[i] -= static_cast<float>(update);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace pedseg::nn
