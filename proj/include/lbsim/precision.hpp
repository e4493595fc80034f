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

// bfloat16 emulation and the mixed-precision convolution policy.
//
// Values stay in fp32 storage, rounded to the nearest bfloat16-representable
// number. Under kMixedBf16Conv only convolution operands (input and kernel)
// are rounded; accumulation and every other op remain at full precision.

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "lbsim/ops.hpp"

namespace lbsim {

enum class PrecisionPolicy { kFp32Only, kMixedBf16Conv };

inline std::string_view to_string(PrecisionPolicy p) {
  return p == PrecisionPolicy::kFp32Only ? "fp32" : "mixed_bf16";
}

inline PrecisionPolicy parse_precision(std::string_view s) {
  if (s == "fp32") return PrecisionPolicy::kFp32Only;
  if (s == "mixed_bf16") return PrecisionPolicy::kMixedBf16Conv;
  throw ConfigError("precision must be fp32 | mixed_bf16, got '" + std::string(s) + "'");
}

// Round-to-nearest-even onto the upper 16 bits of the fp32 pattern. NaN is
// returned quieted with its sign; Inf passes through unchanged.
inline std::uint16_t bf16_bits(float x) {
  const std::uint32_t u = std::bit_cast<std::uint32_t>(x);
  if (std::isnan(x)) return static_cast<std::uint16_t>((u >> 16) | 0x0040u);
  const std::uint32_t lsb = (u >> 16) & 1u;
  return static_cast<std::uint16_t>((u + 0x7fffu + lsb) >> 16);
}

inline float bf16_to_float(std::uint16_t bits) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

inline float to_bf16(float x) { return bf16_to_float(bf16_bits(x)); }

template <typename T>
BasicTensor<T> round_bf16(const BasicTensor<T>& t) {
  BasicTensor<T> r = t;
  for (T& v : r.values()) v = static_cast<T>(to_bf16(static_cast<float>(v)));
  return r;
}

template <typename T>
BasicTensor<T> conv2d_mixed(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                            std::size_t stride, Padding padding,
                            PrecisionPolicy policy) {
  if (policy == PrecisionPolicy::kFp32Only) {
    return conv2d_forward(input, kernel, stride, padding);
  }
  return conv2d_forward(round_bf16(input), round_bf16(kernel), stride, padding);
}

// Gradients flow through the same rounded operands the forward pass used.
// grad_out itself is not rounded.
template <typename T>
ConvGrads<T> conv2d_mixed_backward(const BasicTensor<T>& input,
                                   const BasicTensor<T>& kernel,
                                   const BasicTensor<T>& grad_out, std::size_t stride,
                                   Padding padding, PrecisionPolicy policy) {
  if (policy == PrecisionPolicy::kFp32Only) {
    return conv2d_backward(input, kernel, grad_out, stride, padding);
  }
  return conv2d_backward(round_bf16(input), round_bf16(kernel), grad_out, stride,
                         padding);
}

template <typename T>
BasicTensor<T> depthwise_conv2d_mixed(const BasicTensor<T>& input,
                                      const BasicTensor<T>& kernel,
                                      std::size_t stride, Padding padding,
                                      PrecisionPolicy policy) {
  if (policy == PrecisionPolicy::kFp32Only) {
    return depthwise_conv2d_forward(input, kernel, stride, padding);
  }
  return depthwise_conv2d_forward(round_bf16(input), round_bf16(kernel), stride,
                                  padding);
}

template <typename T>
ConvGrads<T> depthwise_conv2d_mixed_backward(const BasicTensor<T>& input,
                                             const BasicTensor<T>& kernel,
                                             const BasicTensor<T>& grad_out,
                                             std::size_t stride, Padding padding,
                                             PrecisionPolicy policy) {
  if (policy == PrecisionPolicy::kFp32Only) {
    return depthwise_conv2d_backward(input, kernel, grad_out, stride, padding);
  }
  return depthwise_conv2d_backward(round_bf16(input), round_bf16(kernel), grad_out,
                                   stride, padding);
}

}  // namespace lbsim
