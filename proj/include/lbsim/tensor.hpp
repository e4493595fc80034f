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
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lbsim {

// Error hierarchy. Every failure raised by the library derives from Error so
// the CLI can map it to a single runtime-error exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ConsistencyError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t num_elements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

// Dense row-major n-dimensional array. The universal value carrier for
// weights, gradients and activations.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + lbsim::to_string(shape_));
    }
  }

  BasicTensor(Shape shape, std::initializer_list<T> values)
      : BasicTensor(std::move(shape), std::vector<T>(values)) {}

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // NHWC element access for rank-4 tensors.
  T& at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
    return data_[((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
  }
  const T& at(std::size_t n, std::size_t h, std::size_t w,
              std::size_t c) const {
    return data_[((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
  }

  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }

  BasicTensor reshaped(Shape shape) const {
    return BasicTensor(std::move(shape), data_);
  }

  bool all_finite() const {
    for (const T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  static std::size_t checked_size(const Shape& shape) {
    for (std::size_t d : shape) {
      if (d == 0) {
        throw DimensionError("tensor shape " + lbsim::to_string(shape) +
                             " has a zero extent");
      }
    }
    return num_elements(shape);
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b,
                        const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape " + to_string(a.shape()) +
                         " vs " + to_string(b.shape()));
  }
}

// Debug helper: throws when any element is NaN or Inf. Off the hot path.
template <typename T>
void check_finite(const BasicTensor<T>& t, const char* what) {
  if (!t.all_finite()) {
    throw ConsistencyError(std::string(what) + ": non-finite value");
  }
}

template <typename T>
T l2_norm(std::span<const T> v) {
  T acc{0};
  for (const T x : v) acc += x * x;
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Pairwise reduction over a batch-like dimension.
//
// Rows are combined by a binary tree whose left subtree holds the largest
// power of two strictly below the row count. For a power-of-two block size b,
// summing N contiguous blocks of b rows each and then combining the N block
// sums with the same tree gives the identical result, bit for bit, as one
// tree over all N*b rows. Every reduction over examples or replicas uses it.

inline std::size_t tree_split(std::size_t n) {
  std::size_t s = 1;
  while (s * 2 < n) s *= 2;
  return s;
}

// out[j] = sum over i in [0, count) of row(i)[j]; row(i) returns a pointer to
// `width` values.
template <typename T, typename RowFn>
void tree_sum(RowFn&& row, std::size_t first, std::size_t count, std::size_t width, T* out) {
  if (count == 0) {
    std::fill_n(out, width, T{0});
    return;
  }
  if (count == 1) {
    const T* src = row(first);
    std::copy_n(src, width, out);
    return;
  }
  const std::size_t left = tree_split(count);
  tree_sum<T>(row, first, left, width, out);
  std::vector<T> right(width);
  tree_sum<T>(row, first + left, count - left, width, right.data());
  for (std::size_t j = 0; j < width; ++j) out[j] += right[j];
}

// Row-major [count, width] buffer.
template <typename T>
void tree_sum_rows(const T* rows, std::size_t count, std::size_t width, T* out) {
  tree_sum<T>([&](std::size_t i) { return rows + i * width; }, 0, count, width, out);
}

}  // namespace lbsim
