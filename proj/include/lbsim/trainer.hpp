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

// Synchronous data-parallel training and evaluation over simulated replicas.
//
// A train step: every BN group runs forward/backward (statistics shared in
// the group), per-parameter gradients are mean-all-reduced over all N
// replicas in ascending replica order, batch-norm moving statistics are
// mean-all-reduced across groups, and every replica applies the identical
// optimizer update to its own copy of the parameters. Replica work may run
// on several host threads; no result depends on the thread count.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "lbsim/collectives.hpp"
#include "lbsim/data.hpp"
#include "lbsim/model.hpp"
#include "lbsim/optim.hpp"
#include "lbsim/perf_model.hpp"
#include "lbsim/precision.hpp"

namespace lbsim {

enum class OptimizerKind { kRmsProp, kLars };
enum class Grouping { k1d, k2d };

// Flat experiment description; every field maps to one config key.
struct TrainConfig {
  std::string model = "toy_cnn";
  std::string model_tag = "toy";  // cost-model profile: b2 | b5 | toy
  std::string dataset = "synthetic";
  std::string eval_dataset;  // empty: synthetic held-out draw, or the train set for idx
  std::size_t synthetic_classes = 10;
  std::size_t synthetic_examples = 8192;
  std::size_t synthetic_eval_examples = 2048;
  std::size_t image_size = 16;
  std::size_t image_channels = 1;

  std::size_t num_replicas = 1;
  std::size_t per_core_batch = 1;
  std::size_t global_batch = 1;

  std::size_t bn_group_size = 1;
  Grouping bn_grouping = Grouping::k1d;
  std::size_t grid_rows = 0;  // 0: most-square factorization of num_replicas
  std::size_t grid_cols = 0;
  std::size_t tile_rows = 1;
  std::size_t tile_cols = 1;
  double bn_momentum = 0.99;
  double bn_eps = 1e-3;

  OptimizerKind optimizer = OptimizerKind::kRmsProp;
  double lr_per_256 = 0.016;
  double warmup_epochs = 5.0;
  bool polynomial_decay = false;
  double decay_rate = 0.97;
  double epochs_per_decay = 2.4;
  double poly_power = 2.0;
  double end_lr = 0.0;
  double lars_eta = 0.001;
  double lars_weight_decay = 1e-5;
  double momentum = 0.9;
  double rmsprop_decay = 0.9;
  double rmsprop_eps = 1e-3;
  double total_epochs = 350.0;

  double eval_every_epochs = 1.0;
  std::size_t eval_batch = 64;
  PrecisionPolicy precision = PrecisionPolicy::kFp32Only;
  std::uint64_t seed = 0;

  std::size_t bn_batch_size() const { return lbsim::bn_batch_size(bn_group_size, per_core_batch); }

  ReplicaTopology topology() const {
    if (grid_rows == 0 && grid_cols == 0) return ReplicaTopology::square(num_replicas);
    return ReplicaTopology::grid(grid_rows, grid_cols);
  }

  GroupAssignment groups() const {
    if (bn_grouping == Grouping::k1d) return assign_groups_1d(num_replicas, bn_group_size);
    return assign_groups_2d(topology(), tile_rows, tile_cols);
  }

  RmsPropConfig rmsprop() const { return {rmsprop_decay, momentum, rmsprop_eps}; }
  LarsConfig lars() const {
    LarsConfig c;
    c.eta = lars_eta;
    c.momentum = momentum;
    c.weight_decay = lars_weight_decay;
    return c;
  }
  BnOptions bn() const { return {bn_momentum, bn_eps}; }

  ScheduleSpec schedule(std::size_t steps_per_epoch) const {
    ScheduleSpec s;
    s.lr_per_256 = lr_per_256;
    s.global_batch = global_batch;
    s.warmup_epochs = warmup_epochs;
    s.total_epochs = total_epochs;
    s.steps_per_epoch = steps_per_epoch;
    if (polynomial_decay) {
      s.decay = PolynomialDecay{poly_power, end_lr};
    } else {
      s.decay = ExponentialDecay{decay_rate, epochs_per_decay};
    }
    return s;
  }

  // Throws ConfigError naming the first violated invariant.
  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (num_replicas < 1) fail("num_replicas must be >= 1");
    if (per_core_batch < 1) fail("per_core_batch must be >= 1");
    if (global_batch != num_replicas * per_core_batch) {
      fail("global_batch " + std::to_string(global_batch) + " != num_replicas " +
           std::to_string(num_replicas) + " * per_core_batch " + std::to_string(per_core_batch));
    }
    if (bn_grouping == Grouping::k1d) {
      if (bn_group_size < 1 || num_replicas % bn_group_size != 0) {
        fail("bn_group_size " + std::to_string(bn_group_size) + " does not divide num_replicas " +
             std::to_string(num_replicas));
      }
    } else {
      const ReplicaTopology t = topology();
      if (t.num_replicas != num_replicas) {
        fail("grid " + std::to_string(t.rows) + "x" + std::to_string(t.cols) +
             " does not hold num_replicas " + std::to_string(num_replicas));
      }
      if (tile_rows < 1 || tile_cols < 1 || t.rows % tile_rows || t.cols % tile_cols) {
        fail("tile " + std::to_string(tile_rows) + "x" + std::to_string(tile_cols) +
             " does not divide grid " + std::to_string(t.rows) + "x" + std::to_string(t.cols));
      }
      if (bn_group_size != tile_rows * tile_cols) {
        fail("bn_group_size must equal tile_rows * tile_cols for 2d grouping");
      }
    }
    if (!(bn_momentum > 0.0 && bn_momentum < 1.0)) fail("bn_momentum must lie in (0, 1)");
    if (!(bn_eps > 0.0)) fail("bn_eps must be > 0");
    if (!(lr_per_256 > 0.0)) fail("lr_per_256 must be > 0");
    if (!(total_epochs >= 0.0)) fail("total_epochs must be >= 0");
    if (!(warmup_epochs >= 0.0 && warmup_epochs <= total_epochs)) {
      fail("warmup_epochs must lie in [0, total_epochs]");
    }
    if (!(decay_rate > 0.0) || !(epochs_per_decay > 0.0)) {
      fail("decay_rate and epochs_per_decay must be > 0");
    }
    if (!(poly_power > 0.0) || !(end_lr >= 0.0)) fail("poly_power must be > 0, end_lr >= 0");
    if (!(lars_eta > 0.0) || !(lars_weight_decay >= 0.0)) {
      fail("lars_eta must be > 0, lars_weight_decay >= 0");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
    if (!(rmsprop_decay > 0.0 && rmsprop_decay < 1.0)) fail("rmsprop_decay must lie in (0, 1)");
    if (!(rmsprop_eps > 0.0)) fail("rmsprop_eps must be > 0");
    if (!(eval_every_epochs > 0.0)) fail("eval_every_epochs must be > 0");
    if (eval_batch < 1) fail("eval_batch must be >= 1");
    if (synthetic_classes < 1 || synthetic_examples < 1 || synthetic_eval_examples < 1 ||
        image_size < 1 || image_channels < 1) {
      fail("synthetic dataset sizes must be positive");
    }
    if (model_tag != "b2" && model_tag != "b5" && model_tag != "toy") {
      fail("model_tag must be b2 | b5 | toy");
    }
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ---------------------------------------------------------------------------
// Host parallelism

// Runs f(i) for i in [0, n) on up to `workers` threads. Work items write
// disjoint outputs; the first exception is rethrown.
template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  const std::size_t t = std::min(workers, n);
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  pool.reserve(t);
  for (std::size_t w = 0; w < t; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += t) f(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Data sharding

// One epoch of shuffled, drop-remainder batches. Step t's global batch is
// perm[t*B, (t+1)*B); replica r takes the r-th slice of b examples of it, so
// the global batch is the same for every N*b factorization of B.
struct EpochShards {
  std::vector<std::size_t> order;
  std::size_t num_replicas = 1;
  std::size_t per_core_batch = 1;
  std::size_t steps = 0;

  std::span<const std::size_t> batch(std::size_t step, std::size_t replica) const {
    const std::size_t start = (step * num_replicas + replica) * per_core_batch;
    return std::span<const std::size_t>(order).subspan(start, per_core_batch);
  }
};

inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed,
                                                  std::uint64_t epoch) {
  return permutation(n, CounterRng(mix_keys(mix_keys(seed, fnv1a("shuffle")), epoch)));
}

inline EpochShards shard_train_data(std::size_t dataset_size, std::size_t num_replicas,
                                    std::size_t per_core_batch, std::uint64_t seed,
                                    std::uint64_t epoch) {
  const std::size_t global = num_replicas * per_core_batch;
  if (dataset_size < 1 || global < 1 || dataset_size < global) {
    throw PreconditionError("dataset of " + std::to_string(dataset_size) +
                            " examples is smaller than one global batch of " +
                            std::to_string(global));
  }
  return {epoch_permutation(dataset_size, seed, epoch), num_replicas, per_core_batch,
          dataset_size / global};
}

// ---------------------------------------------------------------------------
// Replica state and the synchronous step

struct ReplicaState {
  ParamSet<float> params;
  OptimizerState<float> opt;
  BnStatsMap<float> bn_stats;

  friend bool operator==(const ReplicaState&, const ReplicaState&) = default;
};

inline std::vector<ReplicaState> make_replicas(const Model& model, std::size_t n,
                                               std::uint64_t seed) {
  ReplicaState proto;
  proto.params = model.init_params(seed);
  proto.opt = OptimizerState<float>::zeros(proto.params);
  proto.bn_stats = model.init_bn_stats<float>();
  return std::vector<ReplicaState>(n, proto);
}

struct StepOptions {
  OptimizerKind optimizer = OptimizerKind::kRmsProp;
  RmsPropConfig rmsprop;
  LarsConfig lars;
  BnOptions bn;
  PrecisionPolicy precision = PrecisionPolicy::kFp32Only;
  std::size_t workers = 1;
  bool audit = true;
};

namespace detail {

template <typename T>
bool bitwise_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

inline void audit_replicas(const std::vector<ReplicaState>& reps) {
  const ReplicaState& ref = reps.front();
  for (std::size_t r = 1; r < reps.size(); ++r) {
    for (std::size_t p = 0; p < ref.params.size(); ++p) {
      const auto& name = ref.params[p].name;
      if (!bitwise_equal(reps[r].params[p].value, ref.params[p].value)) {
        throw ConsistencyError("replica " + std::to_string(r) + " diverged on parameter '" +
                               name + "'");
      }
      const auto& a = reps[r].opt.slots.at(name);
      const auto& b = ref.opt.slots.at(name);
      if (!bitwise_equal(a.momentum, b.momentum) || !bitwise_equal(a.mean_square, b.mean_square)) {
        throw ConsistencyError("replica " + std::to_string(r) +
                               " diverged on optimizer state of '" + name + "'");
      }
    }
  }
}

}  // namespace detail

struct ReplicaBatch {
  Tensor images;
  std::vector<int> labels;
};

// One synchronous step. Returns the mean of the per-replica losses, which is
// the loss of the global batch.
inline double train_step(const Model& model, std::vector<ReplicaState>& replicas,
                         const std::vector<ReplicaBatch>& batches, const GroupAssignment& groups,
                         float lr, const StepOptions& opt) {
  const std::size_t n = replicas.size();
  if (batches.size() != n || groups.num_replicas() != n) {
    throw PreconditionError("train_step: replicas, batches and group assignment must align");
  }
  const std::size_t num_bn_layers = replicas.front().bn_stats.size();
  std::vector<double> losses(n);
  // saved[layer_name][replica] = (mean, var) of the replica's group.
  std::vector<std::map<std::string, std::pair<Tensor, Tensor>>> saved(n);

  parallel_for(groups.num_groups(), opt.workers, [&](std::size_t g) {
    const auto& members = groups.members[g];
    std::vector<const ParamSet<float>*> cptr;
    std::vector<ParamSet<float>*> mptr;
    std::vector<Tensor> xs;
    std::vector<std::vector<int>> ys;
    for (std::size_t r : members) {
      cptr.push_back(&replicas[r].params);
      mptr.push_back(&replicas[r].params);
      xs.push_back(batches[r].images);
      ys.push_back(batches[r].labels);
    }
    auto pass = group_forward(model, cptr, xs, ys, opt.bn, opt.precision);
    group_backward(model, mptr, pass, opt.bn, opt.precision);
    for (std::size_t k = 0; k < members.size(); ++k) {
      losses[members[k]] = pass.losses[k];
      for (const auto& [layer, fwd] : pass.bn) {
        saved[members[k]][model.layers()[layer].name] = {fwd.saved_mean, fwd.saved_var};
      }
    }
  });

  double loss = 0.0;
  for (double l : losses) loss += l;
  loss /= static_cast<double>(n);

  // Gradient all-reduce, one parameter tensor at a time.
  const std::size_t num_params = replicas.front().params.size();
  parallel_for(num_params, opt.workers, [&](std::size_t p) {
    std::vector<Tensor> grads;
    grads.reserve(n);
    for (const auto& rep : replicas) grads.push_back(rep.params[p].grad);
    auto reduced = all_reduce(grads, ReduceOp::kMean);
    for (std::size_t r = 0; r < n; ++r) replicas[r].params[p].grad = std::move(reduced[r]);
  });

  // Moving statistics: each replica holds its group's batch statistics;
  // averaging over all replicas averages over groups.
  if (num_bn_layers > 0) {
    for (auto& [name, stats] : replicas.front().bn_stats) {
      std::vector<Tensor> means, vars;
      for (std::size_t r = 0; r < n; ++r) {
        means.push_back(saved[r].at(name).first);
        vars.push_back(saved[r].at(name).second);
      }
      const Tensor mean = all_reduce(means, ReduceOp::kMean).front();
      const Tensor var = all_reduce(vars, ReduceOp::kMean).front();
      for (auto& rep : replicas) {
        auto& ms = rep.bn_stats.at(name);
        BnState<float> s;
        s.moving_mean = ms.mean;
        s.moving_var = ms.var;
        s.momentum = static_cast<float>(opt.bn.momentum);
        s = update_moving_stats(std::move(s), mean, var);
        ms.mean = std::move(s.moving_mean);
        ms.var = std::move(s.moving_var);
      }
    }
  }

  parallel_for(n, opt.workers, [&](std::size_t r) {
    if (opt.optimizer == OptimizerKind::kRmsProp) {
      rmsprop_step(replicas[r].params, lr, opt.rmsprop, replicas[r].opt);
    } else {
      lars_step(replicas[r].params, lr, opt.lars, replicas[r].opt);
    }
  });

  if (opt.audit) detail::audit_replicas(replicas);
  return loss;
}

// ---------------------------------------------------------------------------
// Distributed evaluation

struct EvalCounts {
  double correct = 0.0;  // weighted
  double total = 0.0;    // weighted
};

// Sums per-replica counts with an all-reduce and returns correct / total.
inline double aggregate_eval_counts(const std::vector<EvalCounts>& per_replica) {
  std::vector<BasicTensor<double>> t;
  for (const auto& c : per_replica) t.emplace_back(Shape{2}, std::vector<double>{c.correct, c.total});
  const auto sum = all_reduce(t, ReduceOp::kSum).front();
  if (!(sum[1] > 0.0)) throw PreconditionError("distributed_eval: no real examples");
  return sum[0] / sum[1];
}

inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t k = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j) {
    if (logits[row * k + j] > logits[row * k + best]) best = j;
  }
  return best;
}

struct EvalPlan {
  std::size_t padded = 0;
  std::size_t dummies = 0;
  std::size_t per_replica = 0;
};

// The eval set is padded with zero-weight examples to a multiple of
// N * eval_batch and split into N contiguous shards.
inline EvalPlan eval_plan(std::size_t dataset_size, std::size_t num_replicas,
                          std::size_t eval_batch) {
  if (dataset_size < 1) throw PreconditionError("distributed_eval: empty dataset");
  if (num_replicas < 1 || eval_batch < 1) {
    throw PreconditionError("distributed_eval: replicas and eval_batch must be >= 1");
  }
  const std::size_t unit = num_replicas * eval_batch;
  const std::size_t padded = (dataset_size + unit - 1) / unit * unit;
  return {padded, padded - dataset_size, padded / num_replicas};
}

inline double distributed_eval(const Model& model, const ParamSet<float>& params,
                               const BnStatsMap<float>& stats, const Dataset& data,
                               std::size_t num_replicas, std::size_t eval_batch,
                               const BnOptions& bn = {},
                               PrecisionPolicy policy = PrecisionPolicy::kFp32Only,
                               std::size_t workers = 1) {
  const EvalPlan plan = eval_plan(data.size(), num_replicas, eval_batch);
  std::vector<EvalCounts> counts(num_replicas);
  parallel_for(num_replicas, workers, [&](std::size_t r) {
    for (std::size_t start = 0; start < plan.per_replica; start += eval_batch) {
      std::vector<std::size_t> idx;
      std::vector<double> weight;
      for (std::size_t k = 0; k < eval_batch; ++k) {
        const std::size_t global = r * plan.per_replica + start + k;
        const bool real = global < data.size();
        idx.push_back(real ? global : 0);
        weight.push_back(real ? 1.0 : 0.0);
      }
      auto [x, y] = data.batch(idx);
      for (std::size_t k = 0; k < eval_batch; ++k) {
        if (weight[k] == 0.0) {
          // Dummy example: zero image, label 0.
          const std::size_t per = x.size() / eval_batch;
          std::fill_n(x.data().begin() + static_cast<std::ptrdiff_t>(k * per), per, 0.0f);
          y[k] = 0;
        }
      }
      const Tensor logits = predict_logits(model, params, stats, x, bn, policy);
      for (std::size_t k = 0; k < eval_batch; ++k) {
        const bool hit = argmax_row(logits, k) == static_cast<std::size_t>(y[k]);
        counts[r].correct += hit ? weight[k] : 0.0;
        counts[r].total += weight[k];
      }
    }
  });
  return aggregate_eval_counts(counts);
}

// ---------------------------------------------------------------------------
// The training loop

struct MetricsRecord {
  std::size_t step = 0;  // optimizer steps completed
  double epoch = 0.0;
  double lr = 0.0;
  std::optional<double> train_loss;
  std::optional<double> eval_top1;
  double modeled_step_ms = 0.0;
  double allreduce_frac = 0.0;  // percent of modeled step time
  double elapsed_s = 0.0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

struct RunOptions {
  std::size_t workers = 1;
  bool wallclock = false;  // elapsed_s from the host clock instead of the model
};

struct RunResult {
  std::vector<MetricsRecord> records;
  bool diverged = false;
  std::string diagnostic;
  std::vector<ReplicaState> replicas;
};

inline StepOptions step_options(const TrainConfig& cfg, std::size_t workers) {
  StepOptions o;
  o.optimizer = cfg.optimizer;
  o.rmsprop = cfg.rmsprop();
  o.lars = cfg.lars();
  o.bn = cfg.bn();
  o.precision = cfg.precision;
  o.workers = workers;
  return o;
}

inline RunResult run(const TrainConfig& cfg, const Dataset& train, const Dataset& eval,
                     const RunOptions& ropt = {}) {
  cfg.validate();
  train.validate();
  eval.validate();
  const auto start = std::chrono::steady_clock::now();
  const Model model(model_layers(cfg.model, train.num_classes), train.example_shape());
  const GroupAssignment groups = cfg.groups();
  const StepOptions sopt = step_options(cfg, ropt.workers);

  if (train.size() < cfg.global_batch) {
    throw PreconditionError("dataset of " + std::to_string(train.size()) +
                            " examples is smaller than one global batch of " +
                            std::to_string(cfg.global_batch));
  }
  const std::size_t steps_per_epoch = train.size() / cfg.global_batch;
  const ScheduleSpec sched = cfg.schedule(steps_per_epoch);
  const auto total_steps = static_cast<std::size_t>(
      std::llround(cfg.total_epochs * static_cast<double>(steps_per_epoch)));
  const std::size_t eval_interval = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::llround(cfg.eval_every_epochs * static_cast<double>(steps_per_epoch))));

  const CostModelParams cost = cost_params_for(cfg.model_tag, model.parameter_count());
  const double step_ms = step_time(cfg.per_core_batch, cfg.num_replicas, cost);
  const double ar_pct = allreduce_fraction(cfg.per_core_batch, cfg.num_replicas, cost);

  RunResult result;
  result.replicas = make_replicas(model, cfg.num_replicas, cfg.seed);
  auto& replicas = result.replicas;
  double modeled_ms = 0.0;

  auto elapsed = [&] {
    if (ropt.wallclock) {
      return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    return modeled_ms / 1000.0;
  };
  auto evaluate = [&] {
    return distributed_eval(model, replicas.front().params, replicas.front().bn_stats, eval,
                            cfg.num_replicas, cfg.eval_batch, sopt.bn, cfg.precision,
                            ropt.workers);
  };

  if (total_steps == 0) {
    MetricsRecord rec;
    rec.lr = lr_at(sched, 0);
    rec.eval_top1 = evaluate();
    rec.allreduce_frac = ar_pct;
    rec.elapsed_s = elapsed();
    result.records.push_back(rec);
    return result;
  }

  EpochShards shards;
  std::size_t shard_epoch = std::numeric_limits<std::size_t>::max();
  for (std::size_t s = 0; s < total_steps; ++s) {
    const std::size_t epoch = s / steps_per_epoch;
    if (epoch != shard_epoch) {
      shards = shard_train_data(train.size(), cfg.num_replicas, cfg.per_core_batch, cfg.seed,
                                epoch);
      shard_epoch = epoch;
    }
    std::vector<ReplicaBatch> batches(cfg.num_replicas);
    for (std::size_t r = 0; r < cfg.num_replicas; ++r) {
      auto [x, y] = train.batch(shards.batch(s % steps_per_epoch, r));
      batches[r] = {std::move(x), std::move(y)};
    }
    const double lr = lr_at(sched, s);
    const double loss =
        train_step(model, replicas, batches, groups, static_cast<float>(lr), sopt);
    modeled_ms += step_ms;

    MetricsRecord rec;
    rec.step = s + 1;
    rec.epoch = static_cast<double>(s + 1) / static_cast<double>(steps_per_epoch);
    rec.lr = lr;
    rec.train_loss = loss;
    rec.modeled_step_ms = step_ms;
    rec.allreduce_frac = ar_pct;
    if (!std::isfinite(loss)) {
      rec.elapsed_s = elapsed();
      result.records.push_back(rec);
      result.diverged = true;
      result.diagnostic = "non-finite training loss at step " + std::to_string(s + 1) +
                          " (lr " + std::to_string(lr) + ")";
      return result;
    }
    if ((s + 1) % eval_interval == 0 || s + 1 == total_steps) rec.eval_top1 = evaluate();
    rec.elapsed_s = elapsed();
    result.records.push_back(rec);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Time to peak accuracy

struct PeakResult {
  double peak_top1 = 0.0;
  double time = 0.0;
};

// Best eval_top1 and the time of its first attainment; times[i] belongs to
// records[i].
inline PeakResult time_to_peak(const std::vector<MetricsRecord>& records,
                               const std::vector<double>& times) {
  if (times.size() != records.size()) {
    throw PreconditionError("time_to_peak: one time per record required");
  }
  std::optional<PeakResult> best;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].eval_top1) continue;
    if (!best || *records[i].eval_top1 > best->peak_top1) {
      best = PeakResult{*records[i].eval_top1, times[i]};
    }
  }
  if (!best) throw PreconditionError("time_to_peak: no eval records");
  return *best;
}

// Modeled minutes: cumulative modeled step time, counted from the start of
// the training loop.
inline PeakResult time_to_peak(const std::vector<MetricsRecord>& records) {
  std::vector<double> minutes;
  double ms = 0.0;
  for (const auto& r : records) {
    ms += r.modeled_step_ms;
    minutes.push_back(ms / 60000.0);
  }
  return time_to_peak(records, minutes);
}

}  // namespace lbsim
