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

#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>

#include "lbsim/precision.hpp"
#include "testing.hpp"

namespace lbsim {
namespace {

using testing::random_tensor;

// Nearest bf16 value chosen by comparing the two truncation neighbours in
// double; ties go to the candidate with an even 7-bit mantissa.
float oracle_bf16(float x) {
  const std::uint32_t u = std::bit_cast<std::uint32_t>(x);
  const std::uint32_t lo_bits = u & 0xffff0000u;
  const float lo = std::bit_cast<float>(lo_bits);
  if ((u & 0xffffu) == 0) return x;
  const std::uint32_t hi_bits = lo_bits + 0x10000u;
  const float hi = std::bit_cast<float>(hi_bits);
  // Rounding past the largest finite magnitude lands on infinity, which sits
  // where 2^128 would.
  const double hi_value = std::isinf(hi) ? std::copysign(std::ldexp(1.0, 128), x) : hi;
  const double dlo = std::abs(static_cast<double>(x) - lo);
  const double dhi = std::abs(static_cast<double>(x) - hi_value);
  if (dlo < dhi) return lo;
  if (dhi < dlo) return hi;
  return ((lo_bits >> 16) & 1u) == 0 ? lo : hi;
}

float random_float(CounterRng& rng) {
  // Mix of raw bit patterns (covering every exponent) and ordinary values.
  if (rng.below(2) == 0) {
    for (;;) {
      const float f = std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64()));
      if (std::isfinite(f)) return f;
    }
  }
  return static_cast<float>((rng.uniform() - 0.5) * 200.0);
}

TEST(Bf16, KnownValues) {
  EXPECT_EQ(to_bf16(1.0f), 1.0f);
  EXPECT_EQ(to_bf16(0.1f), 0.10009765625f);
  EXPECT_EQ(to_bf16(1.0f + std::ldexp(1.0f, -9)), 1.0f);
  // Exact halfway cases: 1 + 2^-8 sits between 1 and 1 + 2^-7.
  EXPECT_EQ(to_bf16(1.0f + std::ldexp(1.0f, -8)), 1.0f);
  EXPECT_EQ(to_bf16(1.0f + 3 * std::ldexp(1.0f, -8)), 1.0f + std::ldexp(1.0f, -6));
  EXPECT_EQ(to_bf16(-0.1f), -0.10009765625f);
  EXPECT_EQ(std::bit_cast<std::uint32_t>(to_bf16(-0.0f)), 0x80000000u);
}

TEST(Bf16, SpecialValuesPropagate) {
  const float inf = std::numeric_limits<float>::infinity();
  EXPECT_EQ(to_bf16(inf), inf);
  EXPECT_EQ(to_bf16(-inf), -inf);
  EXPECT_TRUE(std::isnan(to_bf16(std::numeric_limits<float>::quiet_NaN())));
  // A NaN whose payload lives only in the low bits must not become Inf.
  EXPECT_TRUE(std::isnan(to_bf16(std::bit_cast<float>(0x7f800001u))));
  EXPECT_EQ(to_bf16(std::numeric_limits<float>::max()), inf);
}

TEST(Bf16, ExhaustiveRoundTripOfAllPatterns) {
  for (std::uint32_t bits = 0; bits < 0x10000u; ++bits) {
    const float f = bf16_to_float(static_cast<std::uint16_t>(bits));
    if (std::isnan(f)) {
      EXPECT_TRUE(std::isnan(to_bf16(f)));
      continue;
    }
    ASSERT_EQ(bf16_bits(f), bits) << std::hex << bits;
    ASSERT_EQ(std::bit_cast<std::uint32_t>(to_bf16(f)), bits << 16);
  }
}

TEST(Bf16, MatchesOracleIdempotentAndMonotoneOnAMillionSamples) {
  CounterRng rng(2026, "bf16-samples");
  std::vector<float> xs(1'000'000);
  for (float& x : xs) x = random_float(rng);
  for (float x : xs) {
    const float r = to_bf16(x);
    ASSERT_EQ(std::bit_cast<std::uint32_t>(r), std::bit_cast<std::uint32_t>(oracle_bf16(x)))
        << std::hexfloat << x;
    ASSERT_EQ(std::bit_cast<std::uint32_t>(to_bf16(r)), std::bit_cast<std::uint32_t>(r));
  }
  std::sort(xs.begin(), xs.end());
  for (std::size_t i = 1; i < xs.size(); ++i) {
    ASSERT_LE(to_bf16(xs[i - 1]), to_bf16(xs[i])) << std::hexfloat << xs[i - 1] << " " << xs[i];
  }
}

TEST(Bf16, RelativeErrorWithinHalfUlp) {
  CounterRng rng(3, "bf16-rel");
  for (int i = 0; i < 100000; ++i) {
    const float x = static_cast<float>((rng.uniform() - 0.5) * 1e4);
    if (x == 0.0f || std::abs(x) < 1e-30f) continue;
    EXPECT_LE(std::abs(to_bf16(x) - x), std::ldexp(std::abs(x), -8));
  }
}

TEST(Precision, ParseAndPrint) {
  EXPECT_EQ(parse_precision("fp32"), PrecisionPolicy::kFp32Only);
  EXPECT_EQ(parse_precision("mixed_bf16"), PrecisionPolicy::kMixedBf16Conv);
  EXPECT_EQ(to_string(PrecisionPolicy::kMixedBf16Conv), "mixed_bf16");
  EXPECT_THROW(parse_precision("fp16"), ConfigError);
}

TEST(ConvMixed, Fp32PolicyIsBitwiseConv2d) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = random_tensor({2, 6, 5, 3}, seed, -1, 1, "x");
    const Tensor k = random_tensor({3, 3, 3, 4}, seed, -1, 1, "k");
    EXPECT_EQ(conv2d_mixed(x, k, 2, Padding::kSame, PrecisionPolicy::kFp32Only),
              conv2d_forward(x, k, 2, Padding::kSame));
    const Tensor go = random_tensor({2, 3, 3, 4}, seed, -1, 1, "go");
    const auto a = conv2d_mixed_backward(x, k, go, 2, Padding::kSame, PrecisionPolicy::kFp32Only);
    const auto b = conv2d_backward(x, k, go, 2, Padding::kSame);
    EXPECT_EQ(a.grad_input, b.grad_input);
    EXPECT_EQ(a.grad_kernel, b.grad_kernel);
  }
}

TEST(ConvMixed, RepresentableOperandsAreUnchanged) {
  CounterRng rng(8, "ints");
  Tensor x({1, 5, 5, 2}), k({3, 3, 2, 2});
  for (float& v : x.values()) v = static_cast<float>(rng.below(257));
  for (float& v : k.values()) v = static_cast<float>(static_cast<int>(rng.below(17)) - 8);
  EXPECT_EQ(conv2d_mixed(x, k, 1, Padding::kSame, PrecisionPolicy::kMixedBf16Conv),
            conv2d_forward(x, k, 1, Padding::kSame));
  Tensor d({3, 3, 2});
  for (float& v : d.values()) v = static_cast<float>(rng.below(9));
  EXPECT_EQ(depthwise_conv2d_mixed(x, d, 1, Padding::kSame, PrecisionPolicy::kMixedBf16Conv),
            depthwise_conv2d_forward(x, d, 1, Padding::kSame));
}

TEST(ConvMixed, EqualsConvOfRoundedOperands) {
  const Tensor x = random_tensor({2, 5, 5, 2}, 1, -1, 1, "x");
  const Tensor k = random_tensor({3, 3, 2, 3}, 1, -1, 1, "k");
  EXPECT_EQ(conv2d_mixed(x, k, 1, Padding::kSame, PrecisionPolicy::kMixedBf16Conv),
            conv2d_forward(round_bf16(x), round_bf16(k), 1, Padding::kSame));
}

TEST(ConvMixed, RelativeErrorBoundedByAccumulationLength) {
  // Non-negative operands: no cancellation, so each output's relative error
  // is bounded by the operand rounding (2^-8 each) times the term count.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = random_tensor({2, 6, 6, 3}, seed, 0, 1, "x");
    const Tensor k = random_tensor({3, 3, 3, 4}, seed, 0, 1, "k");
    const std::size_t len = 3 * 3 * 3;
    const Tensor mixed = conv2d_mixed(x, k, 1, Padding::kValid, PrecisionPolicy::kMixedBf16Conv);
    const Tensor full = conv2d_forward(x, k, 1, Padding::kValid);
    for (std::size_t i = 0; i < full.size(); ++i) {
      EXPECT_LE(std::abs(mixed[i] - full[i]), std::ldexp(1.0, -7) * len * std::abs(full[i]));
    }
  }
}

TEST(ConvMixed, SignedOperandsErrorBoundedByAbsoluteSum) {
  const Tensor x = random_tensor({1, 5, 5, 2}, 4, -1, 1, "x");
  const Tensor k = random_tensor({3, 3, 2, 2}, 4, -1, 1, "k");
  const Tensor mixed = conv2d_mixed(x, k, 1, Padding::kValid, PrecisionPolicy::kMixedBf16Conv);
  const Tensor full = conv2d_forward(x, k, 1, Padding::kValid);
  Tensor ax = x, ak = k;
  for (float& v : ax.values()) v = std::abs(v);
  for (float& v : ak.values()) v = std::abs(v);
  const Tensor bound = conv2d_forward(ax, ak, 1, Padding::kValid);
  for (std::size_t i = 0; i < full.size(); ++i) {
    EXPECT_LE(std::abs(mixed[i] - full[i]), std::ldexp(1.0, -7) * bound[i] + 1e-6);
  }
}

TEST(ConvMixed, BackwardUsesRoundedOperands) {
  const Tensor x = random_tensor({2, 5, 5, 2}, 6, -1, 1, "x");
  const Tensor k = random_tensor({3, 3, 2, 3}, 6, -1, 1, "k");
  const Tensor go = random_tensor({2, 5, 5, 3}, 6, -1, 1, "go");
  const auto m = conv2d_mixed_backward(x, k, go, 1, Padding::kSame, PrecisionPolicy::kMixedBf16Conv);
  const auto r = conv2d_backward(round_bf16(x), round_bf16(k), go, 1, Padding::kSame);
  EXPECT_EQ(m.grad_input, r.grad_input);
  EXPECT_EQ(m.grad_kernel, r.grad_kernel);
}

TEST(ConvMixed, BackwardAgreesWithFiniteDifferencesOfMixedForward) {
  // The mixed forward is piecewise constant in its raw operands, so the
  // check differentiates it around the rounded point, where the rounded
  // operand moves continuously with the probe (fp32 storage, rounding is
  // applied once to the base point).
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor x = random_tensor({1, 4, 4, 2}, seed, -1, 1, "x");
    const Tensor k = random_tensor({3, 3, 2, 2}, seed, -1, 1, "k");
    const Tensor go = random_tensor({1, 4, 4, 2}, seed, -1, 1, "go");
    const auto m = conv2d_mixed_backward(x, k, go, 1, Padding::kSame, PrecisionPolicy::kMixedBf16Conv);
    const auto xr = round_bf16(x).cast<double>(), kr = round_bf16(k).cast<double>();
    const auto god = go.cast<double>();
    const auto nx = testing::numeric_grad(
        [&](const auto& v) { return testing::dot(conv2d_forward(v, kr, 1, Padding::kSame), god); }, xr);
    const auto nk = testing::numeric_grad(
        [&](const auto& v) { return testing::dot(conv2d_forward(xr, v, 1, Padding::kSame), god); }, kr);
    EXPECT_LT(testing::max_rel_err(m.grad_input.cast<double>(), nx), 1e-2);
    EXPECT_LT(testing::max_rel_err(m.grad_kernel.cast<double>(), nk), 1e-2);
  }
}

TEST(DepthwiseMixed, Fp32PolicyIsBitwiseAndMixedRoundsOperands) {
  const Tensor x = random_tensor({2, 5, 5, 3}, 2, -1, 1, "x");
  const Tensor k = random_tensor({3, 3, 3}, 2, -1, 1, "k");
  EXPECT_EQ(depthwise_conv2d_mixed(x, k, 2, Padding::kSame, PrecisionPolicy::kFp32Only),
            depthwise_conv2d_forward(x, k, 2, Padding::kSame));
  EXPECT_EQ(depthwise_conv2d_mixed(x, k, 2, Padding::kSame, PrecisionPolicy::kMixedBf16Conv),
            depthwise_conv2d_forward(round_bf16(x), round_bf16(k), 2, Padding::kSame));
  const Tensor go = random_tensor({2, 3, 3, 3}, 2, -1, 1, "go");
  const auto m = depthwise_conv2d_mixed_backward(x, k, go, 2, Padding::kSame,
                                                 PrecisionPolicy::kMixedBf16Conv);
  const auto r = depthwise_conv2d_backward(round_bf16(x), round_bf16(k), go, 2, Padding::kSame);
  EXPECT_EQ(m.grad_input, r.grad_input);
  EXPECT_EQ(m.grad_kernel, r.grad_kernel);
}

}  // namespace
}  // namespace lbsim
