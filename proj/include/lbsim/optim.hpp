/* Copyright 2026 The lbsim Authors.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// RMSProp and LARS optimizers plus the learning-rate schedule engine
// (linear scaling per 256 examples, linear warmup from zero, staircase
// exponential or polynomial decay).

#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <variant>

#include "lbsim/parameter.hpp"

namespace lbsim {

// ---------------------------------------------------------------------------
// Learning-rate schedule

struct ExponentialDecay {
  double rate = 0.97;
  double epochs_per_decay = 2.4;
  friend bool operator==(const ExponentialDecay&, const ExponentialDecay&) = default;
};

struct PolynomialDecay {
  double power = 2.0;
  double end_lr = 0.0;
  friend bool operator==(const PolynomialDecay&, const PolynomialDecay&) = default;
};

using Decay = std::variant<ExponentialDecay, PolynomialDecay>;

struct ScheduleSpec {
  double lr_per_256 = 0.016;
  std::size_t global_batch = 256;
  double warmup_epochs = 0.0;
  double total_epochs = 350.0;
  std::size_t steps_per_epoch = 1;
  Decay decay = PolynomialDecay{};

  void validate() const {
    if (!(lr_per_256 > 0.0)) throw ConfigError("lr_per_256 must be > 0");
    if (global_batch < 1) throw ConfigError("global batch must be >= 1");
    if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be >= 1");
    if (!(warmup_epochs >= 0.0 && warmup_epochs <= total_epochs)) {
      throw ConfigError("warmup_epochs must lie in [0, total_epochs]");
    }
    if (const auto* e = std::get_if<ExponentialDecay>(&decay)) {
      if (!(e->epochs_per_decay > 0.0) || !(e->rate > 0.0)) {
        throw ConfigError("exponential decay needs rate > 0 and epochs_per_decay > 0");
      }
    }
  }

  friend bool operator==(const ScheduleSpec&, const ScheduleSpec&) = default;
};

// Linear scaling rule: lr_per_256 * global_batch / 256.
inline double base_lr(double lr_per_256, std::size_t global_batch) {
  if (global_batch < 1) throw PreconditionError("base_lr: global_batch must be >= 1");
  return lr_per_256 * static_cast<double>(global_batch) / 256.0;
}

inline double lr_at(const ScheduleSpec& spec, std::size_t step) {
  const double peak = base_lr(spec.lr_per_256, spec.global_batch);
  const double e = static_cast<double>(step) / static_cast<double>(spec.steps_per_epoch);
  const double warm = spec.warmup_epochs;
  if (e < warm) return peak * e / warm;
  const double since = e - warm;
  if (const auto* ex = std::get_if<ExponentialDecay>(&spec.decay)) {
    // Staircase. The small slack keeps boundaries like 5 + 2.4k, which are
    // not exact in binary, on the right side of the jump.
    const double k = std::floor(since / ex->epochs_per_decay + 1e-9);
    return peak * std::pow(ex->rate, k);
  }
  const auto& poly = std::get<PolynomialDecay>(spec.decay);
  if (e >= spec.total_epochs) return poly.end_lr;
  const double frac = since / (spec.total_epochs - warm);
  return poly.end_lr + (peak - poly.end_lr) * std::pow(1.0 - frac, poly.power);
}

// ---------------------------------------------------------------------------
// Optimizers

struct RmsPropConfig {
  double decay = 0.9;
  double momentum = 0.9;
  double eps = 1e-3;
  friend bool operator==(const RmsPropConfig&, const RmsPropConfig&) = default;
};

struct LarsConfig {
  double eta = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  double eps = 0.0;
  std::set<ParamTag> exclude_tags = {ParamTag::kBias, ParamTag::kBnGamma,
                                     ParamTag::kBnBeta};
  friend bool operator==(const LarsConfig&, const LarsConfig&) = default;
};

template <typename T>
struct Slots {
  BasicTensor<T> mean_square;  // RMSProp only
  BasicTensor<T> momentum;
  friend bool operator==(const Slots&, const Slots&) = default;
};

// Per-parameter accumulators keyed by parameter name.
template <typename T>
struct OptimizerState {
  std::map<std::string, Slots<T>> slots;

  static OptimizerState zeros(const ParamSet<T>& params) {
    OptimizerState s;
    for (const auto& p : params) {
      s.slots.emplace(p.name, Slots<T>{BasicTensor<T>(p.value.shape()),
                                       BasicTensor<T>(p.value.shape())});
    }
    return s;
  }

  Slots<T>& at(const Parameter<T>& p) {
    auto it = slots.find(p.name);
    if (it == slots.end()) {
      throw PreconditionError("optimizer state has no slot for '" + p.name + "'");
    }
    if (it->second.momentum.shape() != p.value.shape()) {
      throw DimensionError("optimizer slot '" + p.name + "' shape " +
                           to_string(it->second.momentum.shape()) + " vs parameter " +
                           to_string(p.value.shape()));
    }
    return it->second;
  }

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

namespace detail {

template <typename T>
void check_keys(const ParamSet<T>& params, const OptimizerState<T>& state) {
  if (params.size() != state.slots.size()) {
    throw PreconditionError("optimizer state holds " + std::to_string(state.slots.size()) +
                            " slots for " + std::to_string(params.size()) + " parameters");
  }
  for (const auto& p : params) require_same_shape(p.value, p.grad, p.name.c_str());
}

}  // namespace detail

// acc <- rho*acc + (1-rho)*g^2; mom <- m*mom + lr*g/sqrt(acc+eps); w <- w - mom.
template <typename T>
void rmsprop_step(ParamSet<T>& params, T lr, const RmsPropConfig& cfg,
                  OptimizerState<T>& state) {
  detail::check_keys(params, state);
  const T rho = static_cast<T>(cfg.decay), m = static_cast<T>(cfg.momentum),
          eps = static_cast<T>(cfg.eps);
  for (auto& p : params) {
    Slots<T>& s = state.at(p);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.grad[i];
      s.mean_square[i] = rho * s.mean_square[i] + (T{1} - rho) * g * g;
      s.momentum[i] = m * s.momentum[i] + lr * g / std::sqrt(s.mean_square[i] + eps);
      p.value[i] -= s.momentum[i];
    }
  }
}

// eta*|w| / (|g| + lambda*|w| + eps) when defined, else 1.
template <typename T>
T lars_trust_ratio(T w_norm, T g_norm, const LarsConfig& cfg) {
  const T eta = static_cast<T>(cfg.eta), wd = static_cast<T>(cfg.weight_decay),
          eps = static_cast<T>(cfg.eps);
  if (w_norm > T{0} && g_norm + wd * w_norm > T{0}) {
    return eta * w_norm / (g_norm + wd * w_norm + eps);
  }
  return T{1};
}

// Per parameter tensor: g' = g + lambda*w and local_lr = lr * trust_ratio for
// non-excluded tags; excluded tags take plain momentum SGD at lr.
// mom <- m*mom + local_lr*g'; w <- w - mom.
template <typename T>
void lars_step(ParamSet<T>& params, T lr, const LarsConfig& cfg,
               OptimizerState<T>& state) {
  detail::check_keys(params, state);
  const T m = static_cast<T>(cfg.momentum);
  for (auto& p : params) {
    Slots<T>& s = state.at(p);
    const bool adapt = !cfg.exclude_tags.contains(p.tag);
    const T wd = adapt ? static_cast<T>(cfg.weight_decay) : T{0};
    T local_lr = lr;
    if (adapt) {
      const T w_norm = l2_norm<T>(p.value.data());
      const T g_norm = l2_norm<T>(p.grad.data());
      local_lr = lr * lars_trust_ratio(w_norm, g_norm, cfg);
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.grad[i] + wd * p.value[i];
      s.momentum[i] = m * s.momentum[i] + local_lr * g;
      p.value[i] -= s.momentum[i];
    }
  }
}

}  // namespace lbsim
