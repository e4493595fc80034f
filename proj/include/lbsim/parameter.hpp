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

#include <string>
#include <string_view>
#include <vector>

#include "lbsim/tensor.hpp"

namespace lbsim {

enum class ParamTag { kKernel, kBias, kBnGamma, kBnBeta };

inline std::string_view to_string(ParamTag t) {
  switch (t) {
    case ParamTag::kKernel: return "kernel";
    case ParamTag::kBias: return "bias";
    case ParamTag::kBnGamma: return "bn_gamma";
    case ParamTag::kBnBeta: return "bn_beta";
  }
  return "?";
}

template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;  // same shape as value
  ParamTag tag = ParamTag::kKernel;

  Parameter() = default;
  Parameter(std::string n, BasicTensor<T> v, ParamTag t)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), tag(t) {}

  void zero_grad() { grad.fill(T{0}); }

  friend bool operator==(const Parameter&, const Parameter&) = default;
};

template <typename T>
using ParamSet = std::vector<Parameter<T>>;

template <typename T>
Parameter<T>& find_param(ParamSet<T>& params, std::string_view name) {
  for (auto& p : params) {
    if (p.name == name) return p;
  }
  throw PreconditionError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
const Parameter<T>& find_param(const ParamSet<T>& params, std::string_view name) {
  for (const auto& p : params) {
    if (p.name == name) return p;
  }
  throw PreconditionError("no parameter named '" + std::string(name) + "'");
}

template <typename U, typename T>
ParamSet<U> cast_params(const ParamSet<T>& params) {
  ParamSet<U> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    Parameter<U> q(p.name, p.value.template cast<U>(), p.tag);
    q.grad = p.grad.template cast<U>();
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace lbsim
