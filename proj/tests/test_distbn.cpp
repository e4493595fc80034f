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
#include <cmath>

#include "lbsim/distbn.hpp"
#include "testing.hpp"

namespace lbsim {
namespace {

using testing::random_tensor;

// Textbook BN over one batch, in double, two-pass population variance.
BasicTensor<double> reference_bn(const BasicTensor<double>& x, const BasicTensor<double>& gamma,
                                 const BasicTensor<double>& beta, double eps) {
  const std::size_t c = gamma.size(), rows = x.size() / c;
  BasicTensor<double> y(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < rows; ++i) mean += x[i * c + ch];
    mean /= static_cast<double>(rows);
    for (std::size_t i = 0; i < rows; ++i) var += (x[i * c + ch] - mean) * (x[i * c + ch] - mean);
    var /= static_cast<double>(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      y[i * c + ch] = gamma[ch] * (x[i * c + ch] - mean) / std::sqrt(var + eps) + beta[ch];
    }
  }
  return y;
}

// Stacks replica batches along the leading dimension.
template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& xs) {
  Shape s = xs.front().shape();
  s[0] *= xs.size();
  std::vector<T> data;
  for (const auto& x : xs) data.insert(data.end(), x.values().begin(), x.values().end());
  return BasicTensor<T>(s, std::move(data));
}

template <typename T>
BnState<T> random_state(std::size_t c, std::uint64_t seed, T eps = T(1e-3)) {
  auto s = BnState<T>::identity(c, T(0.99), eps);
  s.gamma = random_tensor<T>({c}, seed, 0.5, 1.5, "gamma");
  s.beta = random_tensor<T>({c}, seed, -0.5, 0.5, "beta");
  return s;
}

std::vector<Tensor> random_group(std::size_t g, Shape shape, std::uint64_t seed) {
  std::vector<Tensor> xs;
  for (std::size_t r = 0; r < g; ++r) {
    xs.push_back(random_tensor(shape, seed * 131 + r, -2, 3, "x"));
  }
  return xs;
}

TEST(GroupBn, HandExampleOverTwoReplicas) {
  BnState<float> s = BnState<float>::identity(1);
  s.eps = 0.0f;
  const std::vector<Tensor> xs{Tensor({2, 1}, {1, 3}), Tensor({2, 1}, {5, 7})};
  const auto out = group_bn_forward(xs, s);
  EXPECT_EQ(out.saved_mean[0], 4.0f);
  EXPECT_EQ(out.saved_var[0], 5.0f);
  const float r5 = std::sqrt(5.0f);
  EXPECT_FLOAT_EQ(out.y[0][0], -3.0f / r5);
  EXPECT_FLOAT_EQ(out.y[0][1], -1.0f / r5);
  EXPECT_FLOAT_EQ(out.y[1][0], 1.0f / r5);
  EXPECT_FLOAT_EQ(out.y[1][1], 3.0f / r5);
}

TEST(GroupBn, ZeroGammaGivesBeta) {
  auto s = random_state<float>(3, 4);
  s.gamma.fill(0.0f);
  const auto out = group_bn_forward(random_group(2, {2, 3, 3, 3}, 1), s);
  for (const auto& y : out.y) {
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], s.beta[i % 3]);
  }
}

TEST(GroupBn, SingleReplicaGroupMatchesTextbookBn) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto xs = random_group(1, {4, 3, 3, 2}, seed);
    const auto s = random_state<float>(2, seed);
    const auto out = group_bn_forward(xs, s);
    const auto ref = reference_bn(xs[0].cast<double>(), s.gamma.cast<double>(),
                                  s.beta.cast<double>(), 1e-3);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.y[0][i], ref[i], 1e-6);
  }
}

TEST(GroupBn, FullGroupEqualsSingleDeviceBnOverConcatenation) {
  for (std::size_t n : {1, 2, 3, 4, 8}) {
    for (std::size_t b : {1, 2, 4}) {
      const auto xs = random_group(n, {b, 3, 2, 3}, n * 10 + b);
      const auto s = random_state<float>(3, b);
      const auto out = group_bn_forward(xs, s);
      const auto ref = reference_bn(concat(xs).cast<double>(), s.gamma.cast<double>(),
                                    s.beta.cast<double>(), 1e-3);
      const auto got = concat(out.y).cast<double>();
      for (std::size_t i = 0; i < got.size(); ++i) {
        EXPECT_NEAR(got[i], ref[i], 1e-6) << "N=" << n << " b=" << b;
      }
      // The same batch on one device, split or not, gives identical statistics.
      const auto single = group_bn_forward(std::vector<Tensor>{concat(xs)}, s);
      if ((b & (b - 1)) == 0) {
        EXPECT_EQ(single.saved_mean, out.saved_mean) << "N=" << n << " b=" << b;
        EXPECT_EQ(concat(single.y), concat(out.y));
      }
    }
  }
}

TEST(GroupBn, PermutingReplicasKeepsStatistics) {
  auto xs = random_group(4, {2, 3, 3, 2}, 9);
  const auto s = random_state<float>(2, 9);
  const auto a = group_bn_forward(xs, s);
  std::reverse(xs.begin(), xs.end());
  const auto b = group_bn_forward(xs, s);
  for (std::size_t ch = 0; ch < 2; ++ch) {
    EXPECT_NEAR(a.saved_mean[ch], b.saved_mean[ch], 1e-7 * std::max(1.0f, std::abs(a.saved_mean[ch])));
    EXPECT_NEAR(a.saved_var[ch], b.saved_var[ch], 1e-7 * std::max(1.0f, a.saved_var[ch]));
  }
  EXPECT_EQ(group_bn_forward(xs, s).saved_mean, b.saved_mean);
}

TEST(GroupBn, InverseTransformRecoversInput) {
  const auto xs = random_group(3, {2, 4, 4, 3}, 12);
  const auto s = random_state<float>(3, 12);
  const auto out = group_bn_forward(xs, s);
  for (std::size_t r = 0; r < xs.size(); ++r) {
    for (std::size_t i = 0; i < xs[r].size(); ++i) {
      const std::size_t ch = i % 3;
      const float back = (out.y[r][i] - s.beta[ch]) * std::sqrt(out.saved_var[ch] + s.eps) /
                             s.gamma[ch] + out.saved_mean[ch];
      EXPECT_NEAR(back, xs[r][i], 1e-5);
    }
  }
}

TEST(GroupBn, ShapeErrors) {
  const auto s = BnState<float>::identity(2);
  EXPECT_THROW(group_bn_forward(std::vector<Tensor>{}, s), PreconditionError);
  EXPECT_THROW(group_bn_forward(std::vector<Tensor>{Tensor({2, 2}), Tensor({3, 2})}, s),
               DimensionError);
  EXPECT_THROW(group_bn_forward(std::vector<Tensor>{Tensor({2, 3})}, s), DimensionError);
  // Batches cannot be empty: a zero extent is rejected when the tensor is built.
  EXPECT_THROW(Tensor({0, 2}), DimensionError);
}

TEST(GroupBn, BatchSizeIsGroupTimesPerCore) {
  EXPECT_EQ(bn_batch_size(8, 4), 32u);
  EXPECT_EQ(bn_batch_size(1, 32), 32u);
  EXPECT_EQ(bn_batch_size(64, 32), 2048u);
}

// Objective: sum over replicas of <y_r, w_r>.
double group_objective(const std::vector<BasicTensor<double>>& xs, const BnState<double>& s,
                       const std::vector<BasicTensor<double>>& ws) {
  const auto out = group_bn_forward(xs, s);
  double total = 0.0;
  for (std::size_t r = 0; r < xs.size(); ++r) total += testing::dot(out.y[r], ws[r]);
  return total;
}

void check_backward_against_fd(std::size_t g, std::uint64_t seed) {
  std::vector<BasicTensor<double>> xs, ws;
  for (std::size_t r = 0; r < g; ++r) {
    xs.push_back(random_tensor<double>({2, 2, 3, 2}, seed * 17 + r, -2, 2, "x"));
    ws.push_back(random_tensor<double>({2, 2, 3, 2}, seed * 17 + r, -1, 1, "w"));
  }
  const auto s = random_state<double>(2, seed);
  const auto fwd = group_bn_forward(xs, s);
  const auto back = group_bn_backward(xs, ws, fwd.saved_mean, fwd.saved_var, s);

  // Inputs of every replica, perturbed through the concatenated batch.
  const auto cat = concat(xs);
  const auto numeric = testing::numeric_grad(
      [&](const BasicTensor<double>& v) {
        std::vector<BasicTensor<double>> parts;
        const std::size_t per = v.size() / g;
        for (std::size_t r = 0; r < g; ++r) {
          parts.push_back(BasicTensor<double>(
              xs[r].shape(), std::vector<double>(v.values().begin() + r * per,
                                                 v.values().begin() + (r + 1) * per)));
        }
        return group_objective(parts, s, ws);
      },
      cat);
  EXPECT_LT(testing::max_rel_err(concat(back.grad_x), numeric), 1e-3) << "G=" << g;

  const auto ng = testing::numeric_grad(
      [&](const BasicTensor<double>& v) {
        auto t = s;
        t.gamma = v;
        return group_objective(xs, t, ws);
      },
      s.gamma);
  const auto nb = testing::numeric_grad(
      [&](const BasicTensor<double>& v) {
        auto t = s;
        t.beta = v;
        return group_objective(xs, t, ws);
      },
      s.beta);
  EXPECT_LT(testing::max_rel_err(back.grad_gamma, ng), 1e-3);
  EXPECT_LT(testing::max_rel_err(back.grad_beta, nb), 1e-3);

  // Local contributions add up to the group-reduced gradients.
  BasicTensor<double> sum_g({2}), sum_b({2});
  for (std::size_t r = 0; r < g; ++r) {
    for (std::size_t ch = 0; ch < 2; ++ch) {
      sum_g[ch] += back.local_grad_gamma[r][ch];
      sum_b[ch] += back.local_grad_beta[r][ch];
    }
  }
  EXPECT_LT(testing::max_rel_err(sum_g, back.grad_gamma), 1e-12);
  EXPECT_LT(testing::max_rel_err(sum_b, back.grad_beta), 1e-12);
}

TEST(GroupBnBackward, SingleReplicaMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) check_backward_against_fd(1, seed);
}

TEST(GroupBnBackward, FourReplicaGroupMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) check_backward_against_fd(4, seed);
}

TEST(GroupBnBackward, ZeroUpstreamGivesZeroGradients) {
  const auto xs = random_group(3, {2, 2, 2, 2}, 5);
  const auto s = random_state<float>(2, 5);
  const auto fwd = group_bn_forward(xs, s);
  const std::vector<Tensor> zeros(3, Tensor({2, 2, 2, 2}));
  const auto back = group_bn_backward(xs, zeros, fwd.saved_mean, fwd.saved_var, s);
  for (const auto& g : back.grad_x) EXPECT_EQ(g, Tensor(g.shape()));
  EXPECT_EQ(back.grad_gamma, Tensor({2}));
  EXPECT_EQ(back.grad_beta, Tensor({2}));
}

TEST(GroupBnBackward, ShapeMismatchIsError) {
  const auto xs = random_group(2, {2, 2}, 1);
  const auto s = BnState<float>::identity(2);
  const auto fwd = group_bn_forward(xs, s);
  EXPECT_THROW(group_bn_backward(xs, std::vector<Tensor>{Tensor({2, 2})}, fwd.saved_mean,
                                 fwd.saved_var, s),
               DimensionError);
  EXPECT_THROW(group_bn_backward(xs, std::vector<Tensor>(2, Tensor({1, 2})), fwd.saved_mean,
                                 fwd.saved_var, s),
               DimensionError);
}

TEST(MovingStats, KnownUpdates) {
  auto s = BnState<float>::identity(1);
  s.moving_mean = Tensor({1}, {0.0f});
  s.moving_var = Tensor({1}, {2.0f});
  const Tensor mean({1}, {10.0f}), var({1}, {4.0f});

  s.momentum = 1.0f;
  auto kept = update_moving_stats(s, mean, var);
  EXPECT_EQ(kept.moving_mean[0], 0.0f);
  EXPECT_EQ(kept.moving_var[0], 2.0f);

  s.momentum = 0.0f;
  auto replaced = update_moving_stats(s, mean, var);
  EXPECT_EQ(replaced.moving_mean[0], 10.0f);
  EXPECT_EQ(replaced.moving_var[0], 4.0f);

  s.momentum = 0.9f;
  EXPECT_NEAR(update_moving_stats(s, mean, var).moving_mean[0], 1.0f, 1e-6);
  EXPECT_THROW(update_moving_stats(s, Tensor({2}), var), DimensionError);
}

TEST(BnInference, UsesMovingStatistics) {
  auto s = BnState<float>::identity(1, 0.99f, 0.0f);
  s.moving_mean = Tensor({1}, {2.0f});
  s.moving_var = Tensor({1}, {4.0f});
  s.gamma = Tensor({1}, {3.0f});
  s.beta = Tensor({1}, {1.0f});
  const Tensor y = bn_inference(Tensor({3, 1}, {2.0f, 4.0f, 0.0f}), s);
  EXPECT_EQ(y, Tensor({3, 1}, {1.0f, 4.0f, -2.0f}));
}

}  // namespace
}  // namespace lbsim
