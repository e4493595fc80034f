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

// A small layer pipeline with explicit per-layer backward passes.
//
// Forward and backward run over one batch-norm group at a time: ordinary
// layers act on each replica independently, batch-norm layers share
// statistics across the group. A single replica is a group of one.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "lbsim/distbn.hpp"
#include "lbsim/ops.hpp"
#include "lbsim/parameter.hpp"
#include "lbsim/precision.hpp"
#include "lbsim/rng.hpp"

namespace lbsim {

enum class LayerKind {
  kConv2d,
  kDepthwiseConv2d,
  kDense,
  kBatchNorm,
  kSwish,
  kRelu,
  kGlobalAvgPool,
  kSoftmaxXentHead,
};

struct LayerSpec {
  LayerKind kind = LayerKind::kSwish;
  std::string name;
  std::size_t units = 0;  // conv out_channels, dense out_features, head classes
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t stride = 1;
  Padding padding = Padding::kSame;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

namespace layers {

inline LayerSpec conv2d(std::string name, std::size_t out_channels, std::size_t kernel,
                        std::size_t stride = 1, Padding padding = Padding::kSame) {
  return {LayerKind::kConv2d, std::move(name), out_channels, kernel, kernel, stride, padding};
}
inline LayerSpec depthwise_conv2d(std::string name, std::size_t kernel, std::size_t stride = 1,
                                  Padding padding = Padding::kSame) {
  return {LayerKind::kDepthwiseConv2d, std::move(name), 0, kernel, kernel, stride, padding};
}
inline LayerSpec dense(std::string name, std::size_t out_features) {
  return {LayerKind::kDense, std::move(name), out_features};
}
inline LayerSpec batchnorm(std::string name) { return {LayerKind::kBatchNorm, std::move(name)}; }
inline LayerSpec swish(std::string name) { return {LayerKind::kSwish, std::move(name)}; }
inline LayerSpec relu(std::string name) { return {LayerKind::kRelu, std::move(name)}; }
inline LayerSpec global_avg_pool(std::string name) {
  return {LayerKind::kGlobalAvgPool, std::move(name)};
}
inline LayerSpec softmax_xent_head(std::string name, std::size_t num_classes) {
  return {LayerKind::kSoftmaxXentHead, std::move(name), num_classes};
}

}  // namespace layers

struct BnOptions {
  double momentum = 0.99;
  double eps = 1e-3;
  friend bool operator==(const BnOptions&, const BnOptions&) = default;
};

template <typename T>
struct MovingStats {
  BasicTensor<T> mean, var;
  friend bool operator==(const MovingStats&, const MovingStats&) = default;
};

template <typename T>
using BnStatsMap = std::map<std::string, MovingStats<T>>;

// A shape-checked layer pipeline over NHWC inputs of a fixed per-example
// shape. The last layer must be a softmax_xent_head.
class Model {
 public:
  struct ParamInfo {
    std::string name;
    Shape shape;
    ParamTag tag;
    std::size_t fan_in;
  };

  Model(std::vector<LayerSpec> specs, Shape example_shape)
      : layers_(std::move(specs)), example_shape_(std::move(example_shape)) {
    if (example_shape_.size() != 3) {
      throw DimensionError("model input must be [H,W,C], got " + to_string(example_shape_));
    }
    if (layers_.empty() || layers_.back().kind != LayerKind::kSoftmaxXentHead) {
      throw PreconditionError("model must end in a softmax_xent_head");
    }
    std::set<std::string> names;
    Shape s = example_shape_;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const LayerSpec& spec = layers_[l];
      if (spec.name.empty() || !names.insert(spec.name).second) {
        throw PreconditionError("layer name '" + spec.name + "' is empty or duplicated");
      }
      first_param_.push_back(params_.size());
      s = infer(spec, s, l + 1 == layers_.size());
      output_shapes_.push_back(s);
    }
  }

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const Shape& example_shape() const { return example_shape_; }
  const std::vector<ParamInfo>& params() const { return params_; }
  std::size_t first_param(std::size_t layer) const { return first_param_[layer]; }
  std::size_t num_classes() const { return layers_.back().units; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += num_elements(p.shape);
    return n;
  }

  // Truncated-normal fan-in scaled kernels, zero biases, gamma = 1, beta = 0.
  // Each parameter draws from its own stream keyed by (seed, name), so the
  // result does not depend on replica count or parameter order.
  ParamSet<float> init_params(std::uint64_t seed) const {
    ParamSet<float> out;
    for (const auto& info : params_) {
      Tensor v(info.shape);
      if (info.tag == ParamTag::kKernel) {
        CounterRng rng(seed, info.name);
        const double stddev = 1.0 / std::sqrt(static_cast<double>(info.fan_in));
        for (float& x : v.values()) x = static_cast<float>(stddev * rng.truncated_normal());
      } else if (info.tag == ParamTag::kBnGamma) {
        v.fill(1.0f);
      }
      out.emplace_back(info.name, std::move(v), info.tag);
    }
    return out;
  }

  template <typename T>
  BnStatsMap<T> init_bn_stats() const {
    BnStatsMap<T> m;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (layers_[l].kind != LayerKind::kBatchNorm) continue;
      const std::size_t c = output_shapes_[l].back();
      m.emplace(layers_[l].name,
                MovingStats<T>{BasicTensor<T>({c}, T{0}), BasicTensor<T>({c}, T{1})});
    }
    return m;
  }

 private:
  Shape infer(const LayerSpec& spec, const Shape& in, bool last) {
    auto require_spatial = [&] {
      if (in.size() != 3) {
        throw DimensionError("layer '" + spec.name + "' needs a spatial input, got " +
                             to_string(in));
      }
    };
    switch (spec.kind) {
      case LayerKind::kConv2d: {
        require_spatial();
        if (spec.units < 1) throw PreconditionError("conv '" + spec.name + "' has no outputs");
        const auto g = conv_geometry(in[0], in[1], spec.kernel_h, spec.kernel_w, spec.stride,
                                     spec.padding);
        const std::size_t fan_in = spec.kernel_h * spec.kernel_w * in[2];
        params_.push_back({spec.name + "/kernel",
                           {spec.kernel_h, spec.kernel_w, in[2], spec.units},
                           ParamTag::kKernel, fan_in});
        return {g.out_h, g.out_w, spec.units};
      }
      case LayerKind::kDepthwiseConv2d: {
        require_spatial();
        const auto g = conv_geometry(in[0], in[1], spec.kernel_h, spec.kernel_w, spec.stride,
                                     spec.padding);
        params_.push_back({spec.name + "/kernel", {spec.kernel_h, spec.kernel_w, in[2]},
                           ParamTag::kKernel, spec.kernel_h * spec.kernel_w});
        return {g.out_h, g.out_w, in[2]};
      }
      case LayerKind::kDense: {
        if (spec.units < 1) throw PreconditionError("dense '" + spec.name + "' has no outputs");
        const std::size_t f = num_elements(in);
        params_.push_back({spec.name + "/kernel", {f, spec.units}, ParamTag::kKernel, f});
        params_.push_back({spec.name + "/bias", {spec.units}, ParamTag::kBias, f});
        return {spec.units};
      }
      case LayerKind::kBatchNorm: {
        const std::size_t c = in.back();
        params_.push_back({spec.name + "/gamma", {c}, ParamTag::kBnGamma, c});
        params_.push_back({spec.name + "/beta", {c}, ParamTag::kBnBeta, c});
        return in;
      }
      case LayerKind::kSwish:
      case LayerKind::kRelu:
        return in;
      case LayerKind::kGlobalAvgPool:
        require_spatial();
        return {in[2]};
      case LayerKind::kSoftmaxXentHead:
        if (!last) throw PreconditionError("softmax_xent_head must be the last layer");
        if (in.size() != 1 || in[0] != spec.units) {
          throw DimensionError("head '" + spec.name + "' expects " + std::to_string(spec.units) +
                               " logits, got " + to_string(in));
        }
        return in;
    }
    throw PreconditionError("unknown layer kind");
  }

  std::vector<LayerSpec> layers_;
  Shape example_shape_;
  std::vector<ParamInfo> params_;
  std::vector<std::size_t> first_param_;
  std::vector<Shape> output_shapes_;
};

// Everything the backward pass needs from one group forward.
template <typename T>
struct GroupPass {
  // inputs[l][r]: input to layer l on replica r (the last entry holds logits).
  std::vector<std::vector<BasicTensor<T>>> inputs;
  std::map<std::size_t, GroupBnForward<T>> bn;  // layer index -> saved stats
  std::vector<T> losses;                          // per replica mean loss
  std::vector<std::vector<int>> labels;
};

template <typename T>
BnState<T> bn_state_for(const Model& model, std::size_t layer, const ParamSet<T>& params,
                        const BnStatsMap<T>* stats, const BnOptions& opt) {
  const std::size_t p = model.first_param(layer);
  BnState<T> s;
  s.gamma = params[p].value;
  s.beta = params[p + 1].value;
  const std::size_t c = s.gamma.size();
  if (stats) {
    const auto& m = stats->at(model.layers()[layer].name);
    s.moving_mean = m.mean;
    s.moving_var = m.var;
  } else {
    s.moving_mean = BasicTensor<T>({c}, T{0});
    s.moving_var = BasicTensor<T>({c}, T{1});
  }
  s.momentum = static_cast<T>(opt.momentum);
  s.eps = static_cast<T>(opt.eps);
  return s;
}

namespace detail {

template <typename T>
BasicTensor<T> layer_forward(const LayerSpec& spec, const BasicTensor<T>& x,
                             const ParamSet<T>& params, std::size_t p0,
                             PrecisionPolicy policy) {
  switch (spec.kind) {
    case LayerKind::kConv2d:
      return conv2d_mixed(x, params[p0].value, spec.stride, spec.padding, policy);
    case LayerKind::kDepthwiseConv2d:
      return depthwise_conv2d_mixed(x, params[p0].value, spec.stride, spec.padding, policy);
    case LayerKind::kDense:
      return dense_forward(x, params[p0].value, params[p0 + 1].value);
    case LayerKind::kSwish:
      return swish_forward(x);
    case LayerKind::kRelu:
      return relu_forward(x);
    case LayerKind::kGlobalAvgPool:
      return global_avg_pool_forward(x);
    default:
      throw PreconditionError("layer '" + spec.name + "' has no per-replica forward");
  }
}

}  // namespace detail

// Training-mode forward over one BN group. replicas[r] holds the parameters
// replica r computes with; xs[r] is its [b,H,W,C] batch.
template <typename T>
GroupPass<T> group_forward(const Model& model, const std::vector<const ParamSet<T>*>& replicas,
                           const std::vector<BasicTensor<T>>& xs,
                           const std::vector<std::vector<int>>& labels, const BnOptions& bn,
                           PrecisionPolicy policy) {
  if (replicas.size() != xs.size() || labels.size() != xs.size() || xs.empty()) {
    throw PreconditionError("group_forward: replicas, inputs and labels must align");
  }
  const auto& specs = model.layers();
  GroupPass<T> pass;
  pass.labels = labels;
  pass.inputs.reserve(specs.size());
  pass.inputs.push_back(xs);
  for (std::size_t l = 0; l + 1 < specs.size(); ++l) {
    const auto& cur = pass.inputs.back();
    std::vector<BasicTensor<T>> next;
    next.reserve(cur.size());
    if (specs[l].kind == LayerKind::kBatchNorm) {
      auto fwd = group_bn_forward(cur, bn_state_for<T>(model, l, *replicas.front(), nullptr, bn));
      next = std::move(fwd.y);
      fwd.y.clear();
      pass.bn.emplace(l, std::move(fwd));
    } else {
      for (std::size_t r = 0; r < cur.size(); ++r) {
        next.push_back(detail::layer_forward(specs[l], cur[r], *replicas[r],
                                             model.first_param(l), policy));
      }
    }
    pass.inputs.push_back(std::move(next));
  }
  for (std::size_t r = 0; r < xs.size(); ++r) {
    pass.losses.push_back(softmax_xent(pass.inputs.back()[r], labels[r]).loss);
  }
  return pass;
}

// Backward over one BN group. Writes into replicas[r]'s grad fields the
// gradient of sum_{r' in group} loss_{r'} flowing through replica r, so that
// summing grads over every replica of every group yields the gradient of the
// sum of all replica losses.
template <typename T>
void group_backward(const Model& model, const std::vector<ParamSet<T>*>& replicas,
                    const GroupPass<T>& pass, const BnOptions& bn, PrecisionPolicy policy) {
  const auto& specs = model.layers();
  const std::size_t g = replicas.size();
  std::vector<BasicTensor<T>> grad(g);
  for (std::size_t r = 0; r < g; ++r) {
    grad[r] = softmax_xent(pass.inputs.back()[r], pass.labels[r]).grad_logits;
    for (auto& p : *replicas[r]) p.zero_grad();
  }
  for (std::size_t l = specs.size() - 1; l-- > 0;) {
    const LayerSpec& spec = specs[l];
    const auto& xs = pass.inputs[l];
    const std::size_t p0 = model.first_param(l);
    if (spec.kind == LayerKind::kBatchNorm) {
      const auto& saved = pass.bn.at(l);
      auto back = group_bn_backward(xs, grad, saved.saved_mean, saved.saved_var,
                                    bn_state_for<T>(model, l, *replicas.front(), nullptr, bn));
      for (std::size_t r = 0; r < g; ++r) {
        (*replicas[r])[p0].grad = std::move(back.local_grad_gamma[r]);
        (*replicas[r])[p0 + 1].grad = std::move(back.local_grad_beta[r]);
      }
      grad = std::move(back.grad_x);
      continue;
    }
    for (std::size_t r = 0; r < g; ++r) {
      ParamSet<T>& ps = *replicas[r];
      switch (spec.kind) {
        case LayerKind::kConv2d: {
          auto cg = conv2d_mixed_backward(xs[r], ps[p0].value, grad[r], spec.stride,
                                          spec.padding, policy);
          ps[p0].grad = std::move(cg.grad_kernel);
          grad[r] = std::move(cg.grad_input);
          break;
        }
        case LayerKind::kDepthwiseConv2d: {
          auto cg = depthwise_conv2d_mixed_backward(xs[r], ps[p0].value, grad[r], spec.stride,
                                                    spec.padding, policy);
          ps[p0].grad = std::move(cg.grad_kernel);
          grad[r] = std::move(cg.grad_input);
          break;
        }
        case LayerKind::kDense: {
          auto dg = dense_backward(xs[r], ps[p0].value, grad[r]);
          ps[p0].grad = std::move(dg.grad_kernel);
          ps[p0 + 1].grad = std::move(dg.grad_bias);
          grad[r] = std::move(dg.grad_input);
          break;
        }
        case LayerKind::kSwish:
          grad[r] = swish_backward(xs[r], grad[r]);
          break;
        case LayerKind::kRelu:
          grad[r] = relu_backward(xs[r], grad[r]);
          break;
        case LayerKind::kGlobalAvgPool:
          grad[r] = global_avg_pool_backward(xs[r].shape(), grad[r]);
          break;
        default:
          throw PreconditionError("unexpected layer '" + spec.name + "' in backward");
      }
    }
  }
}

// Inference-mode logits for one replica: BN uses the moving statistics.
template <typename T>
BasicTensor<T> predict_logits(const Model& model, const ParamSet<T>& params,
                              const BnStatsMap<T>& stats, const BasicTensor<T>& x,
                              const BnOptions& bn, PrecisionPolicy policy) {
  const auto& specs = model.layers();
  BasicTensor<T> a = x;
  for (std::size_t l = 0; l + 1 < specs.size(); ++l) {
    if (specs[l].kind == LayerKind::kBatchNorm) {
      a = bn_inference(a, bn_state_for<T>(model, l, params, &stats, bn));
    } else {
      a = detail::layer_forward(specs[l], a, params, model.first_param(l), policy);
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Built-in architectures.

// conv -> BN -> swish -> global pool -> dense -> head.
inline std::vector<LayerSpec> tiny_cnn_layers(std::size_t num_classes, std::size_t channels = 4) {
  using namespace layers;
  return {conv2d("conv", channels, 3, 1), batchnorm("bn"), swish("act"),
          global_avg_pool("pool"), dense("fc", num_classes),
          softmax_xent_head("head", num_classes)};
}

// Stem conv, a depthwise + pointwise stage (each followed by BN and swish),
// and a dense classifier over the flattened feature map.
inline std::vector<LayerSpec> toy_cnn_layers(std::size_t num_classes) {
  using namespace layers;
  return {conv2d("stem", 8, 3, 2),         batchnorm("stem_bn"), swish("stem_act"),
          depthwise_conv2d("dw", 3, 2),    batchnorm("dw_bn"),   swish("dw_act"),
          conv2d("project", 16, 1, 1),     batchnorm("proj_bn"), swish("proj_act"),
          dense("fc", num_classes),        softmax_xent_head("head", num_classes)};
}

inline std::vector<LayerSpec> linear_layers(std::size_t num_classes) {
  using namespace layers;
  return {dense("fc", num_classes), softmax_xent_head("head", num_classes)};
}

inline std::vector<LayerSpec> model_layers(std::string_view name, std::size_t num_classes) {
  if (name == "toy_cnn") return toy_cnn_layers(num_classes);
  if (name == "tiny_cnn") return tiny_cnn_layers(num_classes);
  if (name == "linear") return linear_layers(num_classes);
  throw ConfigError("model must be toy_cnn | tiny_cnn | linear, got '" + std::string(name) + "'");
}

}  // namespace lbsim
