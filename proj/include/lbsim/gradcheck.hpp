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

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "lbsim/model.hpp"

namespace lbsim {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t elements_checked = 0;
};

namespace detail {

inline double group_loss(const Model& model, const ParamSet<double>& params,
                         const std::vector<BasicTensor<double>>& xs,
                         const std::vector<std::vector<int>>& labels, const BnOptions& bn,
                         PrecisionPolicy policy) {
  std::vector<const ParamSet<double>*> reps(xs.size(), &params);
  const auto pass = group_forward(model, reps, xs, labels, bn, policy);
  double loss = 0.0;
  for (double l : pass.losses) loss += l;
  loss /= static_cast<double>(xs.size());
  if (!std::isfinite(loss)) throw ConsistencyError("grad_check: non-finite loss");
  return loss;
}

}  // namespace detail

// Central-difference check of every parameter element against the analytic
// backward pass. The objective is the mean of the per-replica losses over a
// batch-norm group (one replica for plain BN). Both sides are evaluated in
// double precision so the comparison isolates the derivative formulas.
// Error per element: |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline GradCheckResult grad_check(const Model& model, const ParamSet<float>& params,
                                  const std::vector<Tensor>& inputs,
                                  const std::vector<std::vector<int>>& labels, double eps,
                                  const BnOptions& bn = {},
                                  PrecisionPolicy policy = PrecisionPolicy::kFp32Only) {
  if (!(eps > 0.0)) throw PreconditionError("grad_check: eps must be > 0");
  if (inputs.empty()) throw PreconditionError("grad_check: no inputs");
  const std::size_t g = inputs.size();
  ParamSet<double> base = cast_params<double>(params);
  std::vector<BasicTensor<double>> xs;
  for (const auto& x : inputs) xs.push_back(x.cast<double>());

  // Analytic: mean over replicas of each replica's accumulated gradient.
  std::vector<ParamSet<double>> reps(g, base);
  std::vector<const ParamSet<double>*> cptr;
  std::vector<ParamSet<double>*> mptr;
  for (auto& r : reps) {
    cptr.push_back(&r);
    mptr.push_back(&r);
  }
  const auto pass = group_forward(model, cptr, xs, labels, bn, policy);
  for (double l : pass.losses) {
    if (!std::isfinite(l)) throw ConsistencyError("grad_check: non-finite loss");
  }
  group_backward(model, mptr, pass, bn, policy);

  GradCheckResult result;
  ParamSet<double> probe = base;
  for (std::size_t p = 0; p < base.size(); ++p) {
    for (std::size_t i = 0; i < base[p].value.size(); ++i) {
      double analytic = 0.0;
      for (const auto& r : reps) analytic += r[p].grad[i];
      analytic /= static_cast<double>(g);

      const double w = base[p].value[i];
      probe[p].value[i] = w + eps;
      const double up = detail::group_loss(model, probe, xs, labels, bn, policy);
      probe[p].value[i] = w - eps;
      const double down = detail::group_loss(model, probe, xs, labels, bn, policy);
      probe[p].value[i] = w;
      const double numeric = (up - down) / (2.0 * eps);

      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double err = std::abs(analytic - numeric) / denom;
      ++result.elements_checked;
      if (err > result.max_rel_err) {
        result.max_rel_err = err;
        result.worst_param = base[p].name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

inline GradCheckResult grad_check(const Model& model, const ParamSet<float>& params,
                                  const Tensor& input, const std::vector<int>& labels,
                                  double eps, const BnOptions& bn = {},
                                  PrecisionPolicy policy = PrecisionPolicy::kFp32Only) {
  return grad_check(model, params, std::vector<Tensor>{input},
                    std::vector<std::vector<int>>{labels}, eps, bn, policy);
}

}  // namespace lbsim
