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

// Batch normalization with statistics shared across a group of replicas.
//
// The per-channel mean and (population) variance are taken over every sample
// and spatial position of every replica in the group, i.e. over G*b*H*W
// values. Each example's (h, w) positions are summed in ascending order, the
// example sums are tree-summed within a replica, and the replica partials are
// combined with all_reduce, so a group's statistics do not depend on how its
// examples are split across replicas (for power-of-two per-replica batches).

#pragma once

#include <cmath>
#include <vector>

#include "lbsim/collectives.hpp"
#include "lbsim/tensor.hpp"

namespace lbsim {

template <typename T>
struct BnState {
  BasicTensor<T> gamma, beta;
  BasicTensor<T> moving_mean, moving_var;
  T momentum = T(0.99);
  T eps = T(1e-3);

  static BnState identity(std::size_t channels, T momentum = T(0.99), T eps = T(1e-3)) {
    return {BasicTensor<T>({channels}, T{1}), BasicTensor<T>({channels}, T{0}),
            BasicTensor<T>({channels}, T{0}), BasicTensor<T>({channels}, T{1}),
            momentum, eps};
  }

  std::size_t channels() const { return gamma.size(); }
};

template <typename T>
struct GroupBnForward {
  std::vector<BasicTensor<T>> y;
  BasicTensor<T> saved_mean;
  BasicTensor<T> saved_var;
};

template <typename T>
struct GroupBnBackward {
  std::vector<BasicTensor<T>> grad_x;
  BasicTensor<T> grad_gamma;  // reduced over the group
  BasicTensor<T> grad_beta;
  // Each replica's own contribution, for callers that aggregate across
  // groups themselves.
  std::vector<BasicTensor<T>> local_grad_gamma;
  std::vector<BasicTensor<T>> local_grad_beta;
};

// Number of samples feeding each statistic's batch dimension.
inline std::size_t bn_batch_size(std::size_t group_size, std::size_t per_core_batch) {
  return group_size * per_core_batch;
}

namespace detail {

template <typename T>
std::size_t check_bn_group(const std::vector<BasicTensor<T>>& xs, std::size_t channels) {
  if (xs.empty()) throw PreconditionError("group_bn: empty group");
  const Shape& s = xs.front().shape();
  if (s.empty() || s.back() != channels) {
    throw DimensionError("group_bn: input " + to_string(s) + " does not end in " +
                         std::to_string(channels) + " channels");
  }
  for (const auto& x : xs) {
    if (x.shape() != s) {
      throw DimensionError("group_bn: replica shapes differ, " + to_string(x.shape()) +
                           " vs " + to_string(s));
    }
  }
  return xs.front().size() / channels;  // rows per replica
}

// Per-channel sum over the rows of one replica: rows are grouped by example
// (leading dimension), summed in order within an example, then tree-summed.
template <typename T, typename F>
BasicTensor<T> example_tree_sum(const Shape& shape, std::size_t channels, F&& value) {
  const std::size_t rows = num_elements(shape) / channels;
  const std::size_t examples = shape.size() >= 2 ? shape.front() : rows;
  const std::size_t per = rows / examples;
  std::vector<T> sums(examples * channels, T{0});
  for (std::size_t e = 0; e < examples; ++e) {
    T* dst = &sums[e * channels];
    for (std::size_t i = e * per; i < (e + 1) * per; ++i) {
      for (std::size_t ch = 0; ch < channels; ++ch) dst[ch] += value(i * channels + ch, ch);
    }
  }
  BasicTensor<T> out({channels});
  tree_sum_rows(sums.data(), examples, channels, out.data().data());
  return out;
}

}  // namespace detail

template <typename T>
GroupBnForward<T> group_bn_forward(const std::vector<BasicTensor<T>>& xs,
                                   const BnState<T>& state) {
  const std::size_t c = state.channels();
  const std::size_t rows = detail::check_bn_group(xs, c);
  const T count = static_cast<T>(rows * xs.size());

  std::vector<BasicTensor<T>> partial(xs.size());
  for (std::size_t r = 0; r < xs.size(); ++r) {
    const auto& x = xs[r];
    partial[r] = detail::example_tree_sum<T>(x.shape(), c,
                                             [&](std::size_t k, std::size_t) { return x[k]; });
  }
  BasicTensor<T> mean = all_reduce(partial, ReduceOp::kSum).front();
  for (T& v : mean.values()) v /= count;

  for (std::size_t r = 0; r < xs.size(); ++r) {
    const auto& x = xs[r];
    partial[r] = detail::example_tree_sum<T>(x.shape(), c, [&](std::size_t k, std::size_t ch) {
      const T d = x[k] - mean[ch];
      return d * d;
    });
  }
  BasicTensor<T> var = all_reduce(partial, ReduceOp::kSum).front();
  for (T& v : var.values()) v /= count;

  GroupBnForward<T> out{{}, mean, var};
  out.y.reserve(xs.size());
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T{1} / std::sqrt(var[ch] + state.eps);
  for (const auto& x : xs) {
    BasicTensor<T> y(x.shape());
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t k = i * c + ch;
        y[k] = state.gamma[ch] * ((x[k] - mean[ch]) * inv_std[ch]) + state.beta[ch];
      }
    }
    out.y.push_back(std::move(y));
  }
  return out;
}

// Exact gradient of group_bn_forward with the statistics treated as
// functions of every input in the group.
template <typename T>
GroupBnBackward<T> group_bn_backward(const std::vector<BasicTensor<T>>& xs,
                                     const std::vector<BasicTensor<T>>& grad_ys,
                                     const BasicTensor<T>& saved_mean,
                                     const BasicTensor<T>& saved_var,
                                     const BnState<T>& state) {
  const std::size_t c = state.channels();
  const std::size_t rows = detail::check_bn_group(xs, c);
  if (grad_ys.size() != xs.size()) {
    throw DimensionError("group_bn_backward: " + std::to_string(grad_ys.size()) +
                         " gradients for " + std::to_string(xs.size()) + " replicas");
  }
  for (std::size_t r = 0; r < xs.size(); ++r) require_same_shape(xs[r], grad_ys[r], "group_bn_backward");
  if (saved_mean.size() != c || saved_var.size() != c) {
    throw DimensionError("group_bn_backward: saved statistics do not match channels");
  }
  const T count = static_cast<T>(rows * xs.size());
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T{1} / std::sqrt(saved_var[ch] + state.eps);

  GroupBnBackward<T> out;
  for (std::size_t r = 0; r < xs.size(); ++r) {
    const auto& x = xs[r];
    const auto& gy = grad_ys[r];
    out.local_grad_beta.push_back(detail::example_tree_sum<T>(
        x.shape(), c, [&](std::size_t k, std::size_t) { return gy[k]; }));
    out.local_grad_gamma.push_back(
        detail::example_tree_sum<T>(x.shape(), c, [&](std::size_t k, std::size_t ch) {
          return gy[k] * ((x[k] - saved_mean[ch]) * inv_std[ch]);
        }));
  }
  out.grad_beta = all_reduce(out.local_grad_beta, ReduceOp::kSum).front();
  out.grad_gamma = all_reduce(out.local_grad_gamma, ReduceOp::kSum).front();

  out.grad_x.reserve(xs.size());
  for (std::size_t r = 0; r < xs.size(); ++r) {
    BasicTensor<T> gx(xs[r].shape());
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t k = i * c + ch;
        const T xhat = (xs[r][k] - saved_mean[ch]) * inv_std[ch];
        gx[k] = state.gamma[ch] * inv_std[ch] / count *
                (count * grad_ys[r][k] - out.grad_beta[ch] - xhat * out.grad_gamma[ch]);
      }
    }
    out.grad_x.push_back(std::move(gx));
  }
  return out;
}

// Inference-mode normalization with the moving statistics.
template <typename T>
BasicTensor<T> bn_inference(const BasicTensor<T>& x, const BnState<T>& state) {
  const std::size_t c = state.channels();
  if (x.shape().back() != c) {
    throw DimensionError("bn_inference: input " + to_string(x.shape()));
  }
  BasicTensor<T> y(x.shape());
  const std::size_t rows = x.size() / c;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T scale = state.gamma[ch] / std::sqrt(state.moving_var[ch] + state.eps);
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t k = i * c + ch;
      y[k] = (x[k] - state.moving_mean[ch]) * scale + state.beta[ch];
    }
  }
  return y;
}

// moving <- momentum * moving + (1 - momentum) * saved.
template <typename T>
BnState<T> update_moving_stats(BnState<T> state, const BasicTensor<T>& saved_mean,
                               const BasicTensor<T>& saved_var) {
  require_same_shape(state.moving_mean, saved_mean, "update_moving_stats(mean)");
  require_same_shape(state.moving_var, saved_var, "update_moving_stats(var)");
  const T m = state.momentum;
  for (std::size_t i = 0; i < saved_mean.size(); ++i) {
    state.moving_mean[i] = m * state.moving_mean[i] + (T{1} - m) * saved_mean[i];
    state.moving_var[i] = m * state.moving_var[i] + (T{1} - m) * saved_var[i];
  }
  return state;
}

}  // namespace lbsim
