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
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "lbsim/rng.hpp"
#include "lbsim/tensor.hpp"

namespace lbsim {

struct Dataset {
  Tensor images;  // [n, H, W, C], values in [0, 1]
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  Shape example_shape() const {
    return {images.dim(1), images.dim(2), images.dim(3)};
  }

  void validate() const {
    if (labels.empty()) throw PreconditionError("dataset is empty");
    if (images.rank() != 4 || images.dim(0) != labels.size()) {
      throw DimensionError("dataset images " + to_string(images.shape()) + " vs " +
                           std::to_string(labels.size()) + " labels");
    }
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
        throw PreconditionError("label " + std::to_string(l) + " outside [0, " +
                                std::to_string(num_classes) + ")");
      }
    }
  }

  // Gathers the listed examples into one batch.
  std::pair<Tensor, std::vector<int>> batch(std::span<const std::size_t> indices) const {
    const std::size_t per = images.size() / images.dim(0);
    Shape s = images.shape();
    s[0] = indices.size();
    std::vector<float> data(indices.size() * per);
    std::vector<int> y(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const std::size_t src = indices[i];
      std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(src * per), per,
                  data.begin() + static_cast<std::ptrdiff_t>(i * per));
      y[i] = labels[src];
    }
    return {Tensor(std::move(s), std::move(data)), std::move(y)};
  }
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off,
                               const std::string& path) {
  if (off + 4 > b.size()) throw FormatError("'" + path + "' is truncated in its header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back(static_cast<unsigned char>(v >> 24));
  b.push_back(static_cast<unsigned char>(v >> 16));
  b.push_back(static_cast<unsigned char>(v >> 8));
  b.push_back(static_cast<unsigned char>(v));
}

inline std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// IDX (big-endian) u8 images [n, rows, cols] and u8 labels [n]. Pixels map
// to value / 255.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);

  const std::uint32_t im = detail::read_be32(img, 0, images_path);
  if (im != kIdxImageMagic) {
    throw FormatError("'" + images_path + "': bad image magic " + detail::hex32(im) +
                      ", expected 0x00000803");
  }
  const std::uint32_t lm = detail::read_be32(lab, 0, labels_path);
  if (lm != kIdxLabelMagic) {
    throw FormatError("'" + labels_path + "': bad label magic " + detail::hex32(lm) +
                      ", expected 0x00000801");
  }
  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t nl = detail::read_be32(lab, 4, labels_path);
  if (n != nl) {
    throw FormatError("image count " + std::to_string(n) + " does not match label count " +
                      std::to_string(nl));
  }
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("'" + images_path + "' is empty");
  if (img.size() != 16 + n * rows * cols) {
    throw FormatError("'" + images_path + "' holds " + std::to_string(img.size() - 16) +
                      " pixel bytes, header declares " + std::to_string(n * rows * cols));
  }
  if (lab.size() != 8 + n) {
    throw FormatError("'" + labels_path + "' holds " + std::to_string(lab.size() - 8) +
                      " labels, header declares " + std::to_string(n));
  }
  Dataset d;
  d.images = Tensor({n, rows, cols, 1});
  for (std::size_t i = 0; i < n * rows * cols; ++i) {
    d.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
  }
  d.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.num_classes = static_cast<std::size_t>(max_label) + 1;
  return d;
}

// Writes raw IDX files; the inverse of load_idx at the byte level.
inline void write_idx(const std::string& images_path, const std::string& labels_path,
                      std::size_t rows, std::size_t cols, std::span<const std::uint8_t> pixels,
                      std::span<const std::uint8_t> labels) {
  const std::size_t n = labels.size();
  if (pixels.size() != n * rows * cols) {
    throw DimensionError("write_idx: pixel count does not match n*rows*cols");
  }
  std::vector<unsigned char> img, lab;
  detail::put_be32(img, kIdxImageMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(n));
  detail::put_be32(img, static_cast<std::uint32_t>(rows));
  detail::put_be32(img, static_cast<std::uint32_t>(cols));
  img.insert(img.end(), pixels.begin(), pixels.end());
  detail::put_be32(lab, kIdxLabelMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(n));
  lab.insert(lab.end(), labels.begin(), labels.end());
  std::ofstream(images_path, std::ios::binary)
      .write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  std::ofstream(labels_path, std::ios::binary)
      .write(reinterpret_cast<const char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
}

// Class-conditional images: each class has a fixed uniform-random template
// derived from `seed`; every example is its class template plus N(0, 0.1)
// noise, clamped to [0, 1]. `sample_stream` selects an independent draw of
// labels and noise over the same templates, e.g. a held-out evaluation set.
inline Dataset gen_synthetic(std::size_t num_classes, std::size_t n, std::size_t height,
                             std::size_t width, std::size_t channels, std::uint64_t seed,
                             std::uint64_t sample_stream = 0) {
  if (num_classes < 1 || n < 1 || height < 1 || width < 1 || channels < 1) {
    throw PreconditionError("gen_synthetic: all sizes must be positive");
  }
  const std::size_t per = height * width * channels;
  std::vector<std::vector<float>> templates(num_classes, std::vector<float>(per));
  for (std::size_t k = 0; k < num_classes; ++k) {
    CounterRng rng(seed, "synthetic/template/" + std::to_string(k));
    for (float& v : templates[k]) v = static_cast<float>(rng.uniform());
  }
  Dataset d;
  d.num_classes = num_classes;
  d.images = Tensor({n, height, width, channels});
  d.labels.resize(n);
  const std::uint64_t stream = mix_keys(seed, mix_keys(fnv1a("synthetic/samples"), sample_stream));
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng(mix_keys(stream, i));
    const auto label = static_cast<std::size_t>(rng.below(num_classes));
    d.labels[i] = static_cast<int>(label);
    float* dst = &d.images[i * per];
    for (std::size_t j = 0; j < per; ++j) {
      const double v = templates[label][j] + 0.1 * rng.normal();
      dst[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return d;
}

}  // namespace lbsim
