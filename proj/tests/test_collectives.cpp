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

#include <set>

#include "lbsim/collectives.hpp"
#include "lbsim/trainer.hpp"
#include "testing.hpp"

namespace lbsim {
namespace {

using Groups = std::vector<std::vector<std::size_t>>;

void expect_partition(const GroupAssignment& a, std::size_t n) {
  ASSERT_EQ(a.num_replicas(), n);
  std::set<std::size_t> seen;
  for (std::size_t g = 0; g < a.num_groups(); ++g) {
    EXPECT_EQ(a.members[g].size(), a.group_size);
    EXPECT_TRUE(std::is_sorted(a.members[g].begin(), a.members[g].end()));
    for (std::size_t r : a.members[g]) {
      EXPECT_TRUE(seen.insert(r).second) << "replica " << r << " in two groups";
      EXPECT_EQ(a.group_of[r], g);
    }
  }
  EXPECT_EQ(seen.size(), n);
}

TEST(Topology, MostSquareFactorization) {
  EXPECT_EQ(ReplicaTopology::square(16), (ReplicaTopology{16, 4, 4}));
  EXPECT_EQ(ReplicaTopology::square(8), (ReplicaTopology{8, 2, 4}));
  EXPECT_EQ(ReplicaTopology::square(7), (ReplicaTopology{7, 1, 7}));
  EXPECT_EQ(ReplicaTopology::square(1024), (ReplicaTopology{1024, 32, 32}));
  EXPECT_THROW(ReplicaTopology::square(0), PreconditionError);
}

TEST(Groups1d, FullGroup) {
  EXPECT_EQ(assign_groups_1d(8, 8).members, (Groups{{0, 1, 2, 3, 4, 5, 6, 7}}));
}

TEST(Groups1d, Singletons) {
  EXPECT_EQ(assign_groups_1d(8, 1).members,
            (Groups{{0}, {1}, {2}, {3}, {4}, {5}, {6}, {7}}));
}

TEST(Groups1d, Blocks) {
  EXPECT_EQ(assign_groups_1d(8, 4).members, (Groups{{0, 1, 2, 3}, {4, 5, 6, 7}}));
}

TEST(Groups1d, NonDivisorIsError) {
  EXPECT_THROW(assign_groups_1d(8, 3), PreconditionError);
  EXPECT_THROW(assign_groups_1d(8, 0), PreconditionError);
}

TEST(Groups2d, FourByFourWithTwoByTwoTiles) {
  const auto a = assign_groups_2d(ReplicaTopology::grid(4, 4), 2, 2);
  EXPECT_EQ(a.members, (Groups{{0, 1, 4, 5}, {2, 3, 6, 7}, {8, 9, 12, 13}, {10, 11, 14, 15}}));
  EXPECT_EQ(a.group_size, 4u);
}

TEST(Groups2d, TileEqualToGridIsOneGroup) {
  const auto a = assign_groups_2d(ReplicaTopology::grid(4, 8), 4, 8);
  ASSERT_EQ(a.num_groups(), 1u);
  EXPECT_EQ(a.members[0].size(), 32u);
}

TEST(Groups2d, UnitTilesAreSingletons) {
  EXPECT_EQ(assign_groups_2d(ReplicaTopology::grid(2, 2), 1, 1).members,
            (Groups{{0}, {1}, {2}, {3}}));
}

TEST(Groups2d, NonDivisorTileIsError) {
  EXPECT_THROW(assign_groups_2d(ReplicaTopology::grid(4, 4), 3, 2), PreconditionError);
  EXPECT_THROW(assign_groups_2d(ReplicaTopology::grid(4, 4), 2, 0), PreconditionError);
}

TEST(Groups, PartitionPropertyOverManyShapes) {
  for (std::size_t rows : {1, 2, 4, 8, 16}) {
    for (std::size_t cols : {1, 2, 4, 8, 32}) {
      const auto topo = ReplicaTopology::grid(rows, cols);
      for (std::size_t tr = 1; tr <= rows; tr *= 2) {
        for (std::size_t tc = 1; tc <= cols; tc *= 2) {
          const auto a = assign_groups_2d(topo, tr, tc);
          EXPECT_EQ(a.group_size, tr * tc);
          expect_partition(a, rows * cols);
        }
      }
      for (std::size_t g = 1; g <= rows * cols; g *= 2) {
        expect_partition(assign_groups_1d(rows * cols, g), rows * cols);
      }
    }
  }
}

TEST(Groups, RowTilesOnASingleRowMatchOneDimensional) {
  for (std::size_t n : {4, 8, 12, 32}) {
    for (std::size_t g = 1; g <= n; ++g) {
      if (n % g) continue;
      EXPECT_EQ(assign_groups_2d(ReplicaTopology::grid(1, n), 1, g), assign_groups_1d(n, g))
          << "N=" << n << " G=" << g;
    }
  }
}

TEST(AllReduce, SumOverTwoReplicas) {
  const auto out = all_reduce(std::vector<Tensor>{Tensor({2}, {1, 2}), Tensor({2}, {3, 4})},
                              ReduceOp::kSum);
  EXPECT_EQ(out[0], Tensor({2}, {4, 6}));
  EXPECT_EQ(out[1], Tensor({2}, {4, 6}));
}

TEST(AllReduce, GroupScopedMean) {
  std::vector<Tensor> in;
  for (float v : {1.0f, 2.0f, 3.0f, 4.0f}) in.push_back(Tensor({1}, {v}));
  const auto groups = assign_groups_1d(4, 2);
  auto out = all_reduce_group(in, ReduceOp::kMean, groups, 0);
  out = all_reduce_group(out, ReduceOp::kMean, groups, 1);
  EXPECT_EQ(out[0][0], 1.5f);
  EXPECT_EQ(out[1][0], 1.5f);
  EXPECT_EQ(out[2][0], 3.5f);
  EXPECT_EQ(out[3][0], 3.5f);
}

TEST(AllReduce, ScopeLeavesOthersUntouched) {
  std::vector<Tensor> in;
  for (float v : {1.0f, 2.0f, 3.0f, 4.0f}) in.push_back(Tensor({1}, {v}));
  const auto out = all_reduce_group(in, ReduceOp::kSum, assign_groups_1d(4, 2), 1);
  EXPECT_EQ(out[0][0], 1.0f);
  EXPECT_EQ(out[1][0], 2.0f);
  EXPECT_EQ(out[2][0], 7.0f);
  EXPECT_EQ(out[3][0], 7.0f);
}

TEST(AllReduce, SingleReplicaIsIdentity) {
  const Tensor t = testing::random_tensor({3, 2}, 1);
  EXPECT_EQ(all_reduce(std::vector<Tensor>{t}, ReduceOp::kSum)[0], t);
  EXPECT_EQ(all_reduce(std::vector<Tensor>{t}, ReduceOp::kMean)[0], t);
}

TEST(AllReduce, ShapeMismatchIsError) {
  EXPECT_THROW(all_reduce(std::vector<Tensor>{Tensor({2}), Tensor({3})}, ReduceOp::kSum),
               DimensionError);
}

TEST(AllReduce, MissingGroupIsError) {
  EXPECT_THROW(all_reduce_group(std::vector<Tensor>(4, Tensor({1})), ReduceOp::kSum,
                                assign_groups_1d(4, 2), 2),
               PreconditionError);
}

TEST(AllReduce, EqualsSequentialSumWhenAdditionIsExact) {
  // Small integers add exactly in fp32, so every order agrees.
  for (std::size_t n : {1, 2, 3, 5, 8, 13}) {
    CounterRng rng(n, "ints");
    std::vector<Tensor> in;
    Tensor expected({4});
    for (std::size_t r = 0; r < n; ++r) {
      Tensor t({4});
      for (float& v : t.values()) v = static_cast<float>(static_cast<int>(rng.below(2001)) - 1000);
      for (std::size_t i = 0; i < 4; ++i) expected[i] += t[i];
      in.push_back(t);
    }
    for (const auto& out : all_reduce(in, ReduceOp::kSum)) EXPECT_EQ(out, expected);
  }
}

TEST(AllReduce, EveryParticipantGetsBitwiseIdenticalResult) {
  std::vector<Tensor> in;
  for (std::uint64_t r = 0; r < 7; ++r) in.push_back(testing::random_tensor({50}, r, -1e3, 1e3));
  const auto out = all_reduce(in, ReduceOp::kMean);
  for (const auto& t : out) EXPECT_EQ(t, out[0]);
  EXPECT_EQ(all_reduce(in, ReduceOp::kMean), out);
}

TEST(AllReduce, IndependentOfHostScheduling) {
  // Inputs produced by a parallel loop reduce to the same bits as serially
  // produced inputs.
  std::vector<Tensor> serial(8), parallel(8);
  for (std::size_t r = 0; r < 8; ++r) serial[r] = testing::random_tensor({64}, r);
  parallel_for(8, 4, [&](std::size_t r) { parallel[r] = testing::random_tensor({64}, r); });
  EXPECT_EQ(all_reduce(serial, ReduceOp::kSum), all_reduce(parallel, ReduceOp::kSum));
}

TEST(Padding, KnownValues) {
  EXPECT_EQ(padded_batch_utilization(8).padded, 8u);
  EXPECT_EQ(padded_batch_utilization(8).utilization, 1.0f);
  EXPECT_EQ(padded_batch_utilization(4).padded, 8u);
  EXPECT_EQ(padded_batch_utilization(4).utilization, 0.5f);
  EXPECT_EQ(padded_batch_utilization(9).padded, 16u);
  EXPECT_EQ(padded_batch_utilization(9).utilization, 0.5625f);
  EXPECT_THROW(padded_batch_utilization(0), PreconditionError);
}

TEST(Padding, UtilizationProperties) {
  for (std::size_t b = 1; b <= 1000; ++b) {
    const auto p = padded_batch_utilization(b);
    EXPECT_EQ(p.padded % 8, 0u);
    EXPECT_GE(p.padded, b);
    EXPECT_LT(p.padded, b + 8);
    EXPECT_EQ(p.utilization == 1.0f, b % 8 == 0) << b;
    EXPECT_GE(p.utilization, static_cast<float>(b) / static_cast<float>(b + 7)) << b;
  }
}

}  // namespace
}  // namespace lbsim
