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

// Simulated replica topology, batch-norm group assignment and a functional
// all-reduce. Communication cost lives in perf_model.hpp.

#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "lbsim/tensor.hpp"

namespace lbsim {

struct ReplicaTopology {
  std::size_t num_replicas = 1;
  std::size_t rows = 1;
  std::size_t cols = 1;

  // Most-square factorization with rows <= cols.
  static ReplicaTopology square(std::size_t n) {
    if (n < 1) throw PreconditionError("topology: num_replicas must be >= 1");
    std::size_t r = 1;
    for (std::size_t d = 1; d * d <= n; ++d) {
      if (n % d == 0) r = d;
    }
    return {n, r, n / r};
  }

  static ReplicaTopology grid(std::size_t rows, std::size_t cols) {
    if (rows < 1 || cols < 1) throw PreconditionError("topology: empty grid");
    return {rows * cols, rows, cols};
  }

  friend bool operator==(const ReplicaTopology&, const ReplicaTopology&) = default;
};

struct GroupAssignment {
  std::size_t group_size = 1;
  std::vector<std::size_t> group_of;               // replica -> group id
  std::vector<std::vector<std::size_t>> members;   // group id -> sorted replicas

  std::size_t num_replicas() const { return group_of.size(); }
  std::size_t num_groups() const { return members.size(); }

  friend bool operator==(const GroupAssignment&, const GroupAssignment&) = default;
};

// Contiguous blocks: replica i belongs to group i / G.
inline GroupAssignment assign_groups_1d(std::size_t num_replicas,
                                        std::size_t group_size) {
  if (num_replicas < 1 || group_size < 1 || num_replicas % group_size != 0) {
    throw PreconditionError("bn_group_size " + std::to_string(group_size) +
                            " does not divide num_replicas " +
                            std::to_string(num_replicas));
  }
  GroupAssignment a;
  a.group_size = group_size;
  a.group_of.resize(num_replicas);
  a.members.resize(num_replicas / group_size);
  for (std::size_t i = 0; i < num_replicas; ++i) {
    a.group_of[i] = i / group_size;
    a.members[i / group_size].push_back(i);
  }
  return a;
}

// Rectangular tr x tc tiles of the row-major replica grid. Groups are
// numbered in row-major tile order.
inline GroupAssignment assign_groups_2d(const ReplicaTopology& topo,
                                        std::size_t tile_rows,
                                        std::size_t tile_cols) {
  if (topo.rows * topo.cols != topo.num_replicas) {
    throw PreconditionError("topology grid " + std::to_string(topo.rows) + "x" +
                            std::to_string(topo.cols) + " does not hold " +
                            std::to_string(topo.num_replicas) + " replicas");
  }
  if (tile_rows < 1 || tile_cols < 1 || topo.rows % tile_rows != 0 ||
      topo.cols % tile_cols != 0) {
    throw PreconditionError("tile " + std::to_string(tile_rows) + "x" +
                            std::to_string(tile_cols) + " does not divide grid " +
                            std::to_string(topo.rows) + "x" +
                            std::to_string(topo.cols));
  }
  const std::size_t tiles_per_row = topo.cols / tile_cols;
  GroupAssignment a;
  a.group_size = tile_rows * tile_cols;
  a.group_of.resize(topo.num_replicas);
  a.members.resize(topo.num_replicas / a.group_size);
  for (std::size_t i = 0; i < topo.num_replicas; ++i) {
    const std::size_t r = i / topo.cols, c = i % topo.cols;
    const std::size_t g = (r / tile_rows) * tiles_per_row + c / tile_cols;
    a.group_of[i] = g;
    a.members[g].push_back(i);  // ascending i keeps members sorted
  }
  return a;
}

enum class ReduceOp { kSum, kMean };

// Functional all-reduce. Replicas outside `scope` keep their input; replicas
// inside receive the tree_sum of the participants in ascending replica order.
// scope == nullopt reduces over all replicas.
template <typename T>
std::vector<BasicTensor<T>> all_reduce(const std::vector<BasicTensor<T>>& per_replica,
                                       ReduceOp op,
                                       const std::vector<std::size_t>* scope = nullptr) {
  if (per_replica.empty()) throw PreconditionError("all_reduce: no replicas");
  std::vector<std::size_t> participants;
  if (scope) {
    participants = *scope;
    std::sort(participants.begin(), participants.end());
    if (participants.empty()) throw PreconditionError("all_reduce: empty scope");
    for (std::size_t r : participants) {
      if (r >= per_replica.size()) {
        throw PreconditionError("all_reduce: replica " + std::to_string(r) +
                                " outside topology of " +
                                std::to_string(per_replica.size()));
      }
    }
  } else {
    participants.resize(per_replica.size());
    for (std::size_t i = 0; i < participants.size(); ++i) participants[i] = i;
  }
  const Shape& shape = per_replica[participants.front()].shape();
  for (std::size_t r : participants) {
    if (per_replica[r].shape() != shape) {
      throw DimensionError("all_reduce: replica " + std::to_string(r) + " shape " +
                           to_string(per_replica[r].shape()) + " vs " +
                           to_string(shape));
    }
  }
  BasicTensor<T> acc(shape);
  tree_sum<T>([&](std::size_t k) { return per_replica[participants[k]].data().data(); }, 0,
              participants.size(), acc.size(), acc.data().data());
  if (op == ReduceOp::kMean) {
    const T count = static_cast<T>(participants.size());
    for (T& v : acc.values()) v /= count;
  }
  std::vector<BasicTensor<T>> out = per_replica;
  for (std::size_t r : participants) out[r] = acc;
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> all_reduce_group(const std::vector<BasicTensor<T>>& per_replica,
                                             ReduceOp op, const GroupAssignment& groups,
                                             std::size_t group) {
  if (group >= groups.num_groups()) {
    throw PreconditionError("all_reduce: group " + std::to_string(group) +
                            " does not exist");
  }
  return all_reduce(per_replica, op, &groups.members[group]);
}

struct PaddedBatch {
  std::size_t padded = 0;
  float utilization = 0.0f;
};

// Batch dimension padded to a multiple of eight.
inline PaddedBatch padded_batch_utilization(std::size_t per_core_batch) {
  if (per_core_batch < 1) {
    throw PreconditionError("per-core batch must be >= 1");
  }
  const std::size_t padded = 8 * ((per_core_batch + 7) / 8);
  return {padded, static_cast<float>(per_core_batch) / static_cast<float>(padded)};
}

}  // namespace lbsim
