#pragma once

// Segmentation losses over per-class probability planes. All functions are
// templated on the scalar type so tests can run them in double precision
// while training feeds float activations through a double accumulator.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pedseg/error.hpp"

namespace pedseg::loss {

enum class Family { BCE_Dice, BCE_GDL };

struct LossConfig {
  Family family = Family::BCE_Dice;
  double alpha = 0.5;
  double beta = 0.5;
  double epsilon = 1e-6;
  double prob_clamp = 1e-7;

  void validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0) || !(alpha + beta > 0.0))
      throw Error(ErrorCode::InvalidConfig, "loss weights must be >= 0 with alpha + beta > 0");
    if (!(epsilon > 0.0)) throw Error(ErrorCode::InvalidConfig, "loss epsilon must be > 0");
    if (!(prob_clamp > 0.0 && prob_clamp < 0.5)) throw Error(ErrorCode::InvalidConfig, "prob_clamp must be in (0, 0.5)");
  }
};

inline LossConfig loss_config_from_json(const nlohmann::json& j) {
  for (const auto& [k, v] : j.items())
    if (k != "family" && k != "alpha" && k != "beta" && k != "epsilon" && k != "prob_clamp")
      throw Error(ErrorCode::InvalidConfig, "unknown loss key '" + k + "'");
  LossConfig c;
  const auto fam = j.value("family", std::string("bce_dice"));
  if (fam == "bce_dice") c.family = Family::BCE_Dice;
  else if (fam == "bce_gdl") c.family = Family::BCE_GDL;
  else throw Error(ErrorCode::InvalidConfig, "unknown loss family '" + fam + "'");
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.prob_clamp = j.value("prob_clamp", c.prob_clamp);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const LossConfig& c) {
  return {{"family", c.family == Family::BCE_Dice ? "bce_dice" : "bce_gdl"},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"epsilon", c.epsilon},
          {"prob_clamp", c.prob_clamp}};
}

/// Targets and predictions laid out class-major: element (c, i) sits at
/// c * N + i.
template <class Real>
struct PredictionPair {
  std::span<const Real> y;
  std::span<const Real> y_hat;
  int classes = 1;

  std::size_t voxels() const { return y.size() / static_cast<std::size_t>(classes); }

  void check() const {
    if (y.size() != y_hat.size() || classes < 1 || y.size() % static_cast<std::size_t>(classes) != 0 || y.empty())
      throw Error(ErrorCode::ShapeMismatch, "prediction/target sizes " + std::to_string(y_hat.size()) + " vs " +
                                                std::to_string(y.size()) + " with " + std::to_string(classes) +
                                                " classes");
  }
};

template <class Real>
struct LossWithGrad {
  Real value{};
  std::vector<Real> grad;  // d loss / d y_hat, same layout as the pair
};

template <class Real>
Real bce(const PredictionPair<Real>& p, Real clamp) {
  p.check();
  long double acc = 0.0L;
  for (std::size_t i = 0; i < p.y.size(); ++i) {
    const Real q = std::clamp(p.y_hat[i], clamp, Real(1) - clamp);
    acc -= p.y[i] * std::log(q) + (Real(1) - p.y[i]) * std::log(Real(1) - q);
  }
  return static_cast<Real>(acc / static_cast<long double>(p.y.size()));
}

template <class Real>
std::vector<Real> bce_grad(const PredictionPair<Real>& p, Real clamp) {
  p.check();
  std::vector<Real> g(p.y.size(), Real(0));
  const Real inv_n = Real(1) / static_cast<Real>(p.y.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Real q = p.y_hat[i];
    if (q < clamp || q > Real(1) - clamp) continue;  // clamped: flat
    g[i] = -(p.y[i] / q - (Real(1) - p.y[i]) / (Real(1) - q)) * inv_n;
  }
  return g;
}

namespace detail {

template <class Real>
struct ClassSums {
  std::vector<long double> intersection, target, predicted;
};

template <class Real>
ClassSums<Real> class_sums(const PredictionPair<Real>& p) {
  const std::size_t n = p.voxels();
  ClassSums<Real> s;
  s.intersection.assign(p.classes, 0.0L);
  s.target.assign(p.classes, 0.0L);
  s.predicted.assign(p.classes, 0.0L);
  for (int c = 0; c < p.classes; ++c)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = c * n + i;
      s.intersection[c] += static_cast<long double>(p.y[k]) * p.y_hat[k];
      s.target[c] += p.y[k];
      s.predicted[c] += p.y_hat[k];
    }
  return s;
}

}  // namespace detail

/// Soft Dice loss per class, averaged over classes.
template <class Real>
Real dice_loss(const PredictionPair<Real>& p, Real eps) {
  p.check();
  const auto s = detail::class_sums(p);
  long double acc = 0.0L;
  for (int c = 0; c < p.classes; ++c)
    acc += 1.0L - (2.0L * s.intersection[c] + eps) / (s.target[c] + s.predicted[c] + eps);
  return static_cast<Real>(acc / p.classes);
}

template <class Real>
std::vector<Real> dice_loss_grad(const PredictionPair<Real>& p, Real eps) {
  p.check();
  const auto s = detail::class_sums(p);
  const std::size_t n = p.voxels();
  std::vector<Real> g(p.y.size());
  for (int c = 0; c < p.classes; ++c) {
    const long double num = 2.0L * s.intersection[c] + eps;
    const long double den = s.target[c] + s.predicted[c] + eps;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = c * n + i;
      g[k] = static_cast<Real>(-(2.0L * p.y[k] * den - num) / (den * den) / p.classes);
    }
  }
  return g;
}

/// Inverse squared target volume per class. A class with no target voxels
/// takes the largest finite weight among the other classes (1 if none).
template <class Real>
std::vector<Real> gdl_weights(const PredictionPair<Real>& p) {
  p.check();
  const auto s = detail::class_sums(p);
  std::vector<Real> w(p.classes, Real(0));
  Real cap = Real(0);
  bool any = false;
  for (int c = 0; c < p.classes; ++c)
    if (s.target[c] > 0.0L) {
      w[c] = static_cast<Real>(1.0L / (s.target[c] * s.target[c]));
      cap = any ? std::max(cap, w[c]) : w[c];
      any = true;
    }
  for (int c = 0; c < p.classes; ++c)
    if (!(s.target[c] > 0.0L)) w[c] = any ? cap : Real(1);
  return w;
}

template <class Real>
Real gdl(const PredictionPair<Real>& p, Real eps) {
  const auto w = gdl_weights(p);
  const auto s = detail::class_sums(p);
  long double num = 0.0L, den = 0.0L;
  for (int c = 0; c < p.classes; ++c) {
    num += w[c] * s.intersection[c];
    den += w[c] * (s.target[c] + s.predicted[c]);
  }
  return static_cast<Real>(1.0L - (2.0L * num + eps) / (den + eps));
}

template <class Real>
std::vector<Real> gdl_grad(const PredictionPair<Real>& p, Real eps) {
  const auto w = gdl_weights(p);
  const auto s = detail::class_sums(p);
  long double inter = 0.0L, den = 0.0L;
  for (int c = 0; c < p.classes; ++c) {
    inter += w[c] * s.intersection[c];
    den += w[c] * (s.target[c] + s.predicted[c]);
  }
  const long double num = 2.0L * inter + eps;
  den += eps;
  const std::size_t n = p.voxels();
  std::vector<Real> g(p.y.size());
  for (int c = 0; c < p.classes; ++c)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = c * n + i;
      g[k] = static_cast<Real>(-(2.0L * w[c] * p.y[k] * den - num * w[c]) / (den * den));
    }
  return g;
}

template <class Real>
Real combined_bce_dice(const PredictionPair<Real>& p, const LossConfig& cfg) {
  return static_cast<Real>(cfg.alpha) * bce(p, static_cast<Real>(cfg.prob_clamp)) +
         static_cast<Real>(cfg.beta) * dice_loss(p, static_cast<Real>(cfg.epsilon));
}

template <class Real>
Real combined_bce_gdl(const PredictionPair<Real>& p, const LossConfig& cfg) {
  return static_cast<Real>(cfg.alpha) * bce(p, static_cast<Real>(cfg.prob_clamp)) +
         static_cast<Real>(cfg.beta) * gdl(p, static_cast<Real>(cfg.epsilon));
}

template <class Real>
Real loss_value(const PredictionPair<Real>& p, const LossConfig& cfg) {
  return cfg.family == Family::BCE_Dice ? combined_bce_dice(p, cfg) : combined_bce_gdl(p, cfg);
}

template <class Real>
LossWithGrad<Real> loss_with_grad(const PredictionPair<Real>& p, const LossConfig& cfg) {
  LossWithGrad<Real> out;
  out.value = loss_value(p, cfg);
  const auto a = static_cast<Real>(cfg.alpha), b = static_cast<Real>(cfg.beta);
  const auto gb = bce_grad(p, static_cast<Real>(cfg.prob_clamp));
  const auto gd = cfg.family == Family::BCE_Dice ? dice_loss_grad(p, static_cast<Real>(cfg.epsilon))
                                                 : gdl_grad(p, static_cast<Real>(cfg.epsilon));
  out.grad.resize(gb.size());
  for (std::size_t i = 0; i < gb.size(); ++i) out.grad[i] = a * gb[i] + b * gd[i];
  return out;
}

}  // namespace pedseg::loss
