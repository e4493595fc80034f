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

// Analytic step-time model for synchronous data-parallel training:
//
//   step_ms      = padded(b) * per_image_compute_ms + allreduce_ms
//   allreduce_ms = 2 (N-1)/N * param_bytes / bandwidth + 2 (N-1) * latency
//
// Compute and communication are serialized (no overlap). The per-core batch
// is charged at its padded size, a multiple of eight.

#pragma once

#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "lbsim/collectives.hpp"

namespace lbsim {

struct CostModelParams {
  double per_image_compute_ms = 1.0;
  double param_bytes = 4.0e6;
  double link_bandwidth_bytes_per_ms = 1.0e8;
  double per_hop_latency_ms = 1.0e-3;

  friend bool operator==(const CostModelParams&, const CostModelParams&) = default;
};

// Ring all-reduce: reduce-scatter plus all-gather, each N-1 hops.
inline double allreduce_time(double param_bytes, std::size_t num_replicas,
                             const CostModelParams& p) {
  if (num_replicas < 1) throw PreconditionError("allreduce_time: N must be >= 1");
  if (num_replicas == 1) return 0.0;
  const double n = static_cast<double>(num_replicas);
  return 2.0 * (n - 1.0) / n * param_bytes / p.link_bandwidth_bytes_per_ms +
         2.0 * (n - 1.0) * p.per_hop_latency_ms;
}

inline double compute_time(std::size_t per_core_batch, const CostModelParams& p) {
  return static_cast<double>(padded_batch_utilization(per_core_batch).padded) *
         p.per_image_compute_ms;
}

inline double step_time(std::size_t per_core_batch, std::size_t num_replicas,
                        const CostModelParams& p) {
  return compute_time(per_core_batch, p) + allreduce_time(p.param_bytes, num_replicas, p);
}

// images per ms
inline double throughput(std::size_t global_batch, double step_ms) {
  if (!(step_ms > 0.0)) throw PreconditionError("throughput: step time must be > 0");
  return static_cast<double>(global_batch) / step_ms;
}

// Percent of the step spent in all-reduce.
inline double allreduce_fraction(std::size_t per_core_batch, std::size_t num_replicas,
                                 const CostModelParams& p) {
  return allreduce_time(p.param_bytes, num_replicas, p) /
         step_time(per_core_batch, num_replicas, p) * 100.0;
}

struct BenchRow {
  std::string model;
  std::size_t cores = 1;
  std::size_t global_batch = 1;
  double throughput = 0.0;     // images/ms
  double allreduce_pct = 0.0;  // percent of step time

  std::size_t per_core_batch() const { return global_batch / cores; }
};

// Fits compute, bandwidth and latency to measured rows (param_bytes is
// given, since only param_bytes / bandwidth is identifiable).
//
// Each row is split into measured compute and all-reduce time using its
// throughput and all-reduce percentage. The per-image compute is the
// closed-form minimizer of squared relative error on compute time; the two
// communication coefficients solve the relative-error weighted 2x2 normal
// equations. A negative coefficient is clamped to zero and the other refit
// alone. Fully deterministic.
inline CostModelParams calibrate(const std::vector<BenchRow>& rows, double param_bytes) {
  if (rows.size() < 2) throw PreconditionError("calibrate: need at least two rows");
  std::set<std::size_t> distinct;
  for (const auto& r : rows) {
    if (r.cores < 1 || r.global_batch % r.cores != 0 || !(r.throughput > 0.0) ||
        !(r.allreduce_pct > 0.0 && r.allreduce_pct < 100.0)) {
      throw PreconditionError("calibrate: invalid row for " + r.model + " at " +
                              std::to_string(r.cores) + " cores");
    }
    distinct.insert(r.cores);
  }
  if (distinct.size() < 2) {
    throw PreconditionError("calibrate: degenerate rows, all share one replica count");
  }

  double num = 0.0, den = 0.0;
  double s11 = 0.0, s12 = 0.0, s22 = 0.0, t1 = 0.0, t2 = 0.0;
  for (const auto& r : rows) {
    const double step = static_cast<double>(r.global_batch) / r.throughput;
    const double comm = r.allreduce_pct / 100.0 * step;
    const double comp = step - comm;
    const double padded =
        static_cast<double>(padded_batch_utilization(r.per_core_batch()).padded);
    const double u = padded / comp;
    num += u;
    den += u * u;

    const double n = static_cast<double>(r.cores);
    const double x1 = 2.0 * (n - 1.0) / n / comm;  // coefficient of bytes/bandwidth
    const double x2 = 2.0 * (n - 1.0) / comm;      // coefficient of latency
    s11 += x1 * x1;
    s12 += x1 * x2;
    s22 += x2 * x2;
    t1 += x1;
    t2 += x2;
  }
  CostModelParams p;
  p.param_bytes = param_bytes;
  p.per_image_compute_ms = num / den;

  double bytes_per_bw = 0.0, latency = 0.0;
  const double det = s11 * s22 - s12 * s12;
  if (det > 0.0) {
    bytes_per_bw = (t1 * s22 - t2 * s12) / det;
    latency = (s11 * t2 - s12 * t1) / det;
  }
  if (det <= 0.0 || bytes_per_bw < 0.0 || latency < 0.0) {
    const double a_only = s11 > 0.0 ? t1 / s11 : 0.0;
    const double l_only = s22 > 0.0 ? t2 / s22 : 0.0;
    // Pick whichever single-term fit leaves the smaller residual.
    const double res_a = s11 > 0.0 ? static_cast<double>(rows.size()) - t1 * t1 / s11 : 1e300;
    const double res_l = s22 > 0.0 ? static_cast<double>(rows.size()) - t2 * t2 / s22 : 1e300;
    if (res_a <= res_l) {
      bytes_per_bw = a_only;
      latency = 0.0;
    } else {
      bytes_per_bw = 0.0;
      latency = l_only;
    }
  }
  p.link_bandwidth_bytes_per_ms =
      bytes_per_bw > 0.0 ? param_bytes / bytes_per_bw : std::numeric_limits<double>::infinity();
  p.per_hop_latency_ms = latency;
  return p;
}

struct Prediction {
  double step_ms = 0.0;
  double throughput = 0.0;
  double allreduce_pct = 0.0;
};

inline Prediction predict(std::size_t per_core_batch, std::size_t num_replicas,
                          const CostModelParams& p) {
  Prediction out;
  out.step_ms = step_time(per_core_batch, num_replicas, p);
  out.throughput = throughput(per_core_batch * num_replicas, out.step_ms);
  out.allreduce_pct = allreduce_fraction(per_core_batch, num_replicas, p);
  return out;
}

// Published throughput / all-reduce share for two model sizes at 32 images
// per core.
inline std::vector<BenchRow> reference_table() {
  return {
      {"b2", 128, 4096, 57.57, 2.1},   {"b2", 256, 8192, 113.73, 2.6},
      {"b2", 512, 16384, 227.13, 2.5}, {"b2", 1024, 32768, 451.35, 2.81},
      {"b5", 128, 4096, 9.76, 0.89},   {"b5", 256, 8192, 19.48, 1.24},
      {"b5", 512, 16384, 38.55, 1.24}, {"b5", 1024, 32768, 77.44, 1.03},
  };
}

// fp32 weight bytes. B2/B5 use their published parameter counts (9.2M,
// 30M); anything else is sized by the caller.
inline double default_param_bytes(std::string_view model_tag) {
  if (model_tag == "b2") return 4.0 * 9.2e6;
  if (model_tag == "b5") return 4.0 * 30.0e6;
  return 4.0e6;
}

// Cost parameters for a model tag: b2/b5 are calibrated on every reference
// row of that model; anything else (the desk-scale toy) gets a small fixed
// profile sized by its parameter count.
inline CostModelParams cost_params_for(std::string_view model_tag, std::size_t parameter_count) {
  if (model_tag == "b2" || model_tag == "b5") {
    std::vector<BenchRow> rows;
    for (const auto& r : reference_table()) {
      if (r.model == model_tag) rows.push_back(r);
    }
    return calibrate(rows, default_param_bytes(model_tag));
  }
  CostModelParams p;
  p.per_image_compute_ms = 0.01;
  p.param_bytes = 4.0 * static_cast<double>(parameter_count);
  p.link_bandwidth_bytes_per_ms = 1.0e6;
  p.per_hop_latency_ms = 1.0e-3;
  return p;
}

}  // namespace lbsim
