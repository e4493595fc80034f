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

// Dense kernels with explicit forward and backward passes. Activations are
// NHWC. Every reduction walks its operands in a fixed, documented order so
// results are bit-reproducible.

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lbsim/tensor.hpp"

namespace lbsim {

enum class Padding { kSame, kValid };

// m x k times k x n. Each output accumulates over k in ascending order.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) +
                         " by " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* row = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = &b[p * n];
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

struct ConvGeometry {
  std::size_t out_h = 0, out_w = 0;
  std::size_t pad_top = 0, pad_left = 0;
};

inline ConvGeometry conv_geometry(std::size_t in_h, std::size_t in_w,
                                  std::size_t kh, std::size_t kw,
                                  std::size_t stride, Padding padding) {
  if (stride < 1) throw PreconditionError("conv2d: stride must be >= 1");
  ConvGeometry g;
  if (padding == Padding::kValid) {
    if (kh > in_h || kw > in_w) {
      throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" +
                           std::to_string(kw) + " larger than input " +
                           std::to_string(in_h) + "x" + std::to_string(in_w) +
                           " gives zero-size output");
    }
    g.out_h = (in_h - kh) / stride + 1;
    g.out_w = (in_w - kw) / stride + 1;
  } else {
    g.out_h = (in_h + stride - 1) / stride;
    g.out_w = (in_w + stride - 1) / stride;
    const std::size_t need_h = (g.out_h - 1) * stride + kh;
    const std::size_t need_w = (g.out_w - 1) * stride + kw;
    g.pad_top = need_h > in_h ? (need_h - in_h) / 2 : 0;
    g.pad_left = need_w > in_w ? (need_w - in_w) / 2 : 0;
  }
  return g;
}

namespace detail {

template <typename T>
void check_conv_operands(const BasicTensor<T>& input,
                         const BasicTensor<T>& kernel) {
  if (input.rank() != 4) {
    throw DimensionError("conv2d: input must be NHWC, got " +
                         to_string(input.shape()));
  }
  if (kernel.rank() != 4) {
    throw DimensionError("conv2d: kernel must be [kh,kw,C,Co], got " +
                         to_string(kernel.shape()));
  }
  if (kernel.dim(2) != input.dim(3)) {
    throw DimensionError("conv2d: channel mismatch, input " +
                         to_string(input.shape()) + " kernel " +
                         to_string(kernel.shape()));
  }
}

// Maps output coordinate + kernel tap to an input coordinate; false when the
// tap lands in padding.
inline bool input_coord(std::size_t out, std::size_t tap, std::size_t stride,
                        std::size_t pad, std::size_t extent, std::size_t& in) {
  const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(out * stride + tap) -
                             static_cast<std::ptrdiff_t>(pad);
  if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(extent)) return false;
  in = static_cast<std::size_t>(pos);
  return true;
}

}  // namespace detail

// Cross-correlation. Each output element accumulates over (kh, kw, C) in
// ascending order.
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input,
                              const BasicTensor<T>& kernel, std::size_t stride,
                              Padding padding) {
  detail::check_conv_operands(input, kernel);
  const std::size_t n = input.dim(0), h = input.dim(1), w = input.dim(2),
                    c = input.dim(3);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), co = kernel.dim(3);
  const ConvGeometry g = conv_geometry(h, w, kh, kw, stride, padding);
  BasicTensor<T> out({n, g.out_h, g.out_w, co});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        T* dst = &out.at(b, oy, ox, 0);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          std::size_t iy;
          if (!detail::input_coord(oy, ky, stride, g.pad_top, h, iy)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            std::size_t ix;
            if (!detail::input_coord(ox, kx, stride, g.pad_left, w, ix)) continue;
            const T* src = &input.at(b, iy, ix, 0);
            const T* k = &kernel[((ky * kw + kx) * c) * co];
            for (std::size_t ci = 0; ci < c; ++ci) {
              const T v = src[ci];
              const T* krow = k + ci * co;
              for (std::size_t o = 0; o < co; ++o) dst[o] += v * krow[o];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
struct ConvGrads {
  BasicTensor<T> grad_input;
  BasicTensor<T> grad_kernel;
};

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input,
                             const BasicTensor<T>& kernel,
                             const BasicTensor<T>& grad_out, std::size_t stride,
                             Padding padding) {
  detail::check_conv_operands(input, kernel);
  const std::size_t n = input.dim(0), h = input.dim(1), w = input.dim(2),
                    c = input.dim(3);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), co = kernel.dim(3);
  const ConvGeometry g = conv_geometry(h, w, kh, kw, stride, padding);
  const Shape expected{n, g.out_h, g.out_w, co};
  if (grad_out.shape() != expected) {
    throw DimensionError("conv2d_backward: grad_out " +
                         to_string(grad_out.shape()) + " vs forward output " +
                         to_string(expected));
  }
  ConvGrads<T> r{BasicTensor<T>(input.shape()), BasicTensor<T>(kernel.shape())};
  // Per-example kernel gradients, tree-summed over the batch at the end.
  const std::size_t ksize = kernel.size();
  std::vector<T> per_example(n * ksize, T{0});
  for (std::size_t b = 0; b < n; ++b) {
    T* gk = per_example.data() + b * ksize;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const T* go = &grad_out.at(b, oy, ox, 0);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          std::size_t iy;
          if (!detail::input_coord(oy, ky, stride, g.pad_top, h, iy)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            std::size_t ix;
            if (!detail::input_coord(ox, kx, stride, g.pad_left, w, ix)) continue;
            const T* src = &input.at(b, iy, ix, 0);
            T* gi = &r.grad_input.at(b, iy, ix, 0);
            const std::size_t kbase = ((ky * kw + kx) * c) * co;
            for (std::size_t ci = 0; ci < c; ++ci) {
              const T* krow = &kernel[kbase + ci * co];
              T* gkrow = gk + kbase + ci * co;
              const T v = src[ci];
              T acc{0};
              for (std::size_t o = 0; o < co; ++o) {
                acc += krow[o] * go[o];
                gkrow[o] += v * go[o];
              }
              gi[ci] += acc;
            }
          }
        }
      }
    }
  }
  tree_sum_rows(per_example.data(), n, ksize, r.grad_kernel.data().data());
  return r;
}

// Depthwise convolution with channel multiplier 1; kernel is [kh, kw, C].
template <typename T>
BasicTensor<T> depthwise_conv2d_forward(const BasicTensor<T>& input,
                                        const BasicTensor<T>& kernel,
                                        std::size_t stride, Padding padding) {
  if (input.rank() != 4 || kernel.rank() != 3 || kernel.dim(2) != input.dim(3)) {
    throw DimensionError("depthwise_conv2d: input " + to_string(input.shape()) +
                         " incompatible with kernel " + to_string(kernel.shape()));
  }
  const std::size_t n = input.dim(0), h = input.dim(1), w = input.dim(2),
                    c = input.dim(3);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  const ConvGeometry g = conv_geometry(h, w, kh, kw, stride, padding);
  BasicTensor<T> out({n, g.out_h, g.out_w, c});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        T* dst = &out.at(b, oy, ox, 0);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          std::size_t iy;
          if (!detail::input_coord(oy, ky, stride, g.pad_top, h, iy)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            std::size_t ix;
            if (!detail::input_coord(ox, kx, stride, g.pad_left, w, ix)) continue;
            const T* src = &input.at(b, iy, ix, 0);
            const T* k = &kernel[(ky * kw + kx) * c];
            for (std::size_t ci = 0; ci < c; ++ci) dst[ci] += src[ci] * k[ci];
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const BasicTensor<T>& input,
                                       const BasicTensor<T>& kernel,
                                       const BasicTensor<T>& grad_out,
                                       std::size_t stride, Padding padding) {
  if (input.rank() != 4 || kernel.rank() != 3 || kernel.dim(2) != input.dim(3)) {
    throw DimensionError("depthwise_conv2d: input " + to_string(input.shape()) +
                         " incompatible with kernel " + to_string(kernel.shape()));
  }
  const std::size_t n = input.dim(0), h = input.dim(1), w = input.dim(2),
                    c = input.dim(3);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  const ConvGeometry g = conv_geometry(h, w, kh, kw, stride, padding);
  const Shape expected{n, g.out_h, g.out_w, c};
  if (grad_out.shape() != expected) {
    throw DimensionError("depthwise_conv2d_backward: grad_out " +
                         to_string(grad_out.shape()) + " vs forward output " +
                         to_string(expected));
  }
  ConvGrads<T> r{BasicTensor<T>(input.shape()), BasicTensor<T>(kernel.shape())};
  const std::size_t ksize = kernel.size();
  std::vector<T> per_example(n * ksize, T{0});
  for (std::size_t b = 0; b < n; ++b) {
    T* gk = per_example.data() + b * ksize;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const T* go = &grad_out.at(b, oy, ox, 0);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          std::size_t iy;
          if (!detail::input_coord(oy, ky, stride, g.pad_top, h, iy)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            std::size_t ix;
            if (!detail::input_coord(ox, kx, stride, g.pad_left, w, ix)) continue;
            const T* src = &input.at(b, iy, ix, 0);
            T* gi = &r.grad_input.at(b, iy, ix, 0);
            const std::size_t kbase = (ky * kw + kx) * c;
            for (std::size_t ci = 0; ci < c; ++ci) {
              gi[ci] += kernel[kbase + ci] * go[ci];
              gk[kbase + ci] += src[ci] * go[ci];
            }
          }
        }
      }
    }
  }
  tree_sum_rows(per_example.data(), n, ksize, r.grad_kernel.data().data());
  return r;
}

template <typename T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

template <typename T>
BasicTensor<T> swish_forward(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (T& v : y.values()) v = v * sigmoid(v);
  return y;
}

// dy/dx = s(x) * (1 + x * (1 - s(x))).
template <typename T>
BasicTensor<T> swish_backward(const BasicTensor<T>& x,
                              const BasicTensor<T>& grad_out) {
  require_same_shape(x, grad_out, "swish_backward");
  BasicTensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T s = sigmoid(x[i]);
    g[i] = grad_out[i] * s * (T{1} + x[i] * (T{1} - s));
  }
  return g;
}

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (T& v : y.values()) v = v > T{0} ? v : T{0};
  return y;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x,
                             const BasicTensor<T>& grad_out) {
  require_same_shape(x, grad_out, "relu_backward");
  BasicTensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    g[i] = x[i] > T{0} ? grad_out[i] : T{0};
  }
  return g;
}

// [N,H,W,C] -> [N,C], averaging over (h, w) in row-major order.
template <typename T>
BasicTensor<T> global_avg_pool_forward(const BasicTensor<T>& x) {
  if (x.rank() != 4) {
    throw DimensionError("global_avg_pool: expected NHWC, got " +
                         to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  BasicTensor<T> y({n, c});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      const T* src = &x[(b * hw + p) * c];
      for (std::size_t ci = 0; ci < c; ++ci) y[b * c + ci] += src[ci];
    }
    for (std::size_t ci = 0; ci < c; ++ci) y[b * c + ci] /= static_cast<T>(hw);
  }
  return y;
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& input_shape,
                                        const BasicTensor<T>& grad_out) {
  const std::size_t n = input_shape.at(0), hw = input_shape.at(1) * input_shape.at(2),
                    c = input_shape.at(3);
  if (grad_out.shape() != Shape{n, c}) {
    throw DimensionError("global_avg_pool_backward: grad_out " +
                         to_string(grad_out.shape()));
  }
  BasicTensor<T> g(input_shape);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t ci = 0; ci < c; ++ci) {
        g[(b * hw + p) * c + ci] = grad_out[b * c + ci] / static_cast<T>(hw);
      }
    }
  }
  return g;
}

// Fully connected layer. Inputs of rank > 2 are flattened over every
// trailing dimension: [N, ...] -> [N, F]. kernel is [F, out], bias [out].
template <typename T>
BasicTensor<T> dense_forward(const BasicTensor<T>& x, const BasicTensor<T>& kernel,
                             const BasicTensor<T>& bias) {
  const std::size_t n = x.dim(0), f = x.size() / n;
  if (kernel.rank() != 2 || kernel.dim(0) != f || bias.size() != kernel.dim(1)) {
    throw DimensionError("dense: input " + to_string(x.shape()) + " kernel " +
                         to_string(kernel.shape()) + " bias " +
                         to_string(bias.shape()));
  }
  BasicTensor<T> y = matmul(x.reshaped({n, f}), kernel);
  const std::size_t o = kernel.dim(1);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < o; ++j) y[b * o + j] += bias[j];
  }
  return y;
}

template <typename T>
struct DenseGrads {
  BasicTensor<T> grad_input;
  BasicTensor<T> grad_kernel;
  BasicTensor<T> grad_bias;
};

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& x, const BasicTensor<T>& kernel,
                             const BasicTensor<T>& grad_out) {
  const std::size_t n = x.dim(0), f = x.size() / n, o = kernel.dim(1);
  if (grad_out.shape() != Shape{n, o}) {
    throw DimensionError("dense_backward: grad_out " + to_string(grad_out.shape()));
  }
  DenseGrads<T> r{BasicTensor<T>(x.shape()), BasicTensor<T>(kernel.shape()),
                  BasicTensor<T>({o})};
  // Per-example kernel rows are built on the fly and tree-summed.
  auto kernel_row = [&](std::size_t b) {
    thread_local std::vector<T> buf;
    buf.resize(f * o);
    const T* xr = &x[b * f];
    const T* go = &grad_out[b * o];
    for (std::size_t i = 0; i < f; ++i) {
      for (std::size_t j = 0; j < o; ++j) buf[i * o + j] = xr[i] * go[j];
    }
    return static_cast<const T*>(buf.data());
  };
  for (std::size_t b = 0; b < n; ++b) {
    const T* go = &grad_out[b * o];
    T* gi = &r.grad_input[b * f];
    for (std::size_t i = 0; i < f; ++i) {
      const T* krow = &kernel[i * o];
      T acc{0};
      for (std::size_t j = 0; j < o; ++j) acc += krow[j] * go[j];
      gi[i] = acc;
    }
  }
  tree_sum<T>(kernel_row, 0, n, f * o, r.grad_kernel.data().data());
  tree_sum_rows(grad_out.data().data(), n, o, r.grad_bias.data().data());
  return r;
}

template <typename T>
struct XentResult {
  T loss{};
  BasicTensor<T> grad_logits;
};

// Mean softmax cross-entropy over the batch with max-subtraction.
// grad = (softmax - onehot) / N.
template <typename T>
XentResult<T> softmax_xent(const BasicTensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("softmax_xent: logits " + to_string(logits.shape()) +
                         " with " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  XentResult<T> r{T{0}, BasicTensor<T>(logits.shape())};
  const T inv_n = T{1} / static_cast<T>(n);
  std::vector<T> per_example(n);
  for (std::size_t b = 0; b < n; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw PreconditionError("softmax_xent: label " + std::to_string(label) +
                              " out of range [0, " + std::to_string(k) + ")");
    }
    const T* row = &logits[b * k];
    const T mx = *std::max_element(row, row + k);
    T denom{0};
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    const T log_denom = std::log(denom);
    per_example[b] = log_denom - (row[label] - mx);
    T* g = &r.grad_logits[b * k];
    for (std::size_t j = 0; j < k; ++j) {
      const T p = std::exp(row[j] - mx - log_denom);
      g[j] = (p - (j == static_cast<std::size_t>(label) ? T{1} : T{0})) * inv_n;
    }
  }
  tree_sum_rows(per_example.data(), n, 1, &r.loss);
  r.loss *= inv_n;
  return r;
}

}  // namespace lbsim
