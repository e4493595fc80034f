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

// Experiment configuration: the `key = value` grammar, the preset catalog,
// dataset construction, and the metrics / weights file formats.

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "lbsim/data.hpp"
#include "lbsim/trainer.hpp"

namespace lbsim {

// Shortest decimal that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw Error("format_double: conversion failed");
  return std::string(buf, end);
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("key '" + std::string(key) + "': invalid number '" + std::string(v) + "'");
  }
  return out;
}

inline std::uint64_t parse_uint(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("key '" + std::string(key) + "': invalid non-negative integer '" +
                      std::string(v) + "'");
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Key table

struct ConfigKey {
  std::string name;
  std::function<void(TrainConfig&, std::string_view)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  using detail::parse_double;
  using detail::parse_uint;
  auto size_key = [](std::string name, std::size_t TrainConfig::*field) {
    return ConfigKey{name,
                     [name, field](TrainConfig& c, std::string_view v) {
                       c.*field = static_cast<std::size_t>(parse_uint(name, v));
                     },
                     [field](const TrainConfig& c) { return std::to_string(c.*field); }};
  };
  auto double_key = [](std::string name, double TrainConfig::*field) {
    return ConfigKey{name,
                     [name, field](TrainConfig& c, std::string_view v) {
                       c.*field = parse_double(name, v);
                     },
                     [field](const TrainConfig& c) { return format_double(c.*field); }};
  };
  auto string_key = [](std::string name, std::string TrainConfig::*field) {
    return ConfigKey{name, [field](TrainConfig& c, std::string_view v) { c.*field = v; },
                     [field](const TrainConfig& c) { return c.*field; }};
  };
  static const std::vector<ConfigKey> keys = {
      string_key("model", &TrainConfig::model),
      string_key("model_tag", &TrainConfig::model_tag),
      string_key("dataset", &TrainConfig::dataset),
      string_key("eval_dataset", &TrainConfig::eval_dataset),
      size_key("synthetic_classes", &TrainConfig::synthetic_classes),
      size_key("synthetic_examples", &TrainConfig::synthetic_examples),
      size_key("synthetic_eval_examples", &TrainConfig::synthetic_eval_examples),
      size_key("image_size", &TrainConfig::image_size),
      size_key("image_channels", &TrainConfig::image_channels),
      size_key("num_replicas", &TrainConfig::num_replicas),
      size_key("per_core_batch", &TrainConfig::per_core_batch),
      size_key("global_batch", &TrainConfig::global_batch),
      size_key("bn_group_size", &TrainConfig::bn_group_size),
      ConfigKey{"bn_grouping",
                [](TrainConfig& c, std::string_view v) {
                  if (v == "1d") c.bn_grouping = Grouping::k1d;
                  else if (v == "2d") c.bn_grouping = Grouping::k2d;
                  else throw ConfigError("bn_grouping must be 1d | 2d, got '" + std::string(v) + "'");
                },
                [](const TrainConfig& c) {
                  return std::string(c.bn_grouping == Grouping::k1d ? "1d" : "2d");
                }},
      size_key("grid_rows", &TrainConfig::grid_rows),
      size_key("grid_cols", &TrainConfig::grid_cols),
      size_key("tile_rows", &TrainConfig::tile_rows),
      size_key("tile_cols", &TrainConfig::tile_cols),
      double_key("bn_momentum", &TrainConfig::bn_momentum),
      double_key("bn_eps", &TrainConfig::bn_eps),
      ConfigKey{"optimizer",
                [](TrainConfig& c, std::string_view v) {
                  if (v == "rmsprop") c.optimizer = OptimizerKind::kRmsProp;
                  else if (v == "lars") c.optimizer = OptimizerKind::kLars;
                  else throw ConfigError("optimizer must be rmsprop | lars, got '" + std::string(v) + "'");
                },
                [](const TrainConfig& c) {
                  return std::string(c.optimizer == OptimizerKind::kRmsProp ? "rmsprop" : "lars");
                }},
      double_key("lr_per_256", &TrainConfig::lr_per_256),
      double_key("warmup_epochs", &TrainConfig::warmup_epochs),
      ConfigKey{"decay",
                [](TrainConfig& c, std::string_view v) {
                  if (v == "exponential") c.polynomial_decay = false;
                  else if (v == "polynomial") c.polynomial_decay = true;
                  else throw ConfigError("decay must be exponential | polynomial, got '" + std::string(v) + "'");
                },
                [](const TrainConfig& c) {
                  return std::string(c.polynomial_decay ? "polynomial" : "exponential");
                }},
      double_key("decay_rate", &TrainConfig::decay_rate),
      double_key("epochs_per_decay", &TrainConfig::epochs_per_decay),
      double_key("poly_power", &TrainConfig::poly_power),
      double_key("end_lr", &TrainConfig::end_lr),
      double_key("lars_eta", &TrainConfig::lars_eta),
      double_key("lars_weight_decay", &TrainConfig::lars_weight_decay),
      double_key("momentum", &TrainConfig::momentum),
      double_key("rmsprop_decay", &TrainConfig::rmsprop_decay),
      double_key("rmsprop_eps", &TrainConfig::rmsprop_eps),
      double_key("total_epochs", &TrainConfig::total_epochs),
      double_key("eval_every_epochs", &TrainConfig::eval_every_epochs),
      size_key("eval_batch", &TrainConfig::eval_batch),
      ConfigKey{"precision",
                [](TrainConfig& c, std::string_view v) { c.precision = parse_precision(v); },
                [](const TrainConfig& c) { return std::string(to_string(c.precision)); }},
      ConfigKey{"seed",
                [](TrainConfig& c, std::string_view v) { c.seed = parse_uint("seed", v); },
                [](const TrainConfig& c) { return std::to_string(c.seed); }},
  };
  return keys;
}

inline const ConfigKey* find_key(std::string_view name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Presets

struct Preset {
  std::string name;
  std::string model_tag;  // b2 | b5 | toy
  std::size_t num_replicas = 1;
  std::size_t global_batch = 1;
  OptimizerKind optimizer = OptimizerKind::kRmsProp;
  double lr_per_256 = 0.0;
  bool polynomial_decay = false;
  double warmup_epochs = 0.0;
  // Further key/value settings (desk-scale presets only).
  std::vector<std::pair<std::string, std::string>> extra;
};

// One entry per published hyperparameter row, then the desk-scale presets.
inline const std::vector<Preset>& preset_catalog() {
  using O = OptimizerKind;
  static const std::vector<Preset> catalog = [] {
    std::vector<Preset> p = {
        {"b2-rmsprop-4096", "b2", 128, 4096, O::kRmsProp, 0.016, false, 5.0, {}},
        {"b2-rmsprop-8192", "b2", 256, 8192, O::kRmsProp, 0.016, false, 5.0, {}},
        {"b2-rmsprop-16384", "b2", 512, 16384, O::kRmsProp, 0.016, false, 5.0, {}},
        {"b2-lars-16384", "b2", 512, 16384, O::kLars, 0.236, true, 50.0, {}},
        {"b2-lars-32768", "b2", 1024, 32768, O::kLars, 0.118, true, 50.0, {}},
        {"b5-rmsprop-4096", "b5", 128, 4096, O::kRmsProp, 0.016, false, 5.0, {}},
        {"b5-rmsprop-8192", "b5", 256, 8192, O::kRmsProp, 0.016, false, 5.0, {}},
        {"b5-rmsprop-16384", "b5", 512, 16384, O::kRmsProp, 0.016, false, 5.0, {}},
        {"b5-lars-16384", "b5", 512, 16384, O::kLars, 0.236, true, 50.0, {}},
        {"b5-lars-32768", "b5", 1024, 32768, O::kLars, 0.118, true, 50.0, {}},
        {"b5-lars-65536", "b5", 1024, 65536, O::kLars, 0.081, true, 43.0, {}},
    };
    const std::vector<std::pair<std::string, std::string>> toy_common = {
        {"model", "toy_cnn"},          {"dataset", "synthetic"},
        {"synthetic_classes", "10"},   {"synthetic_examples", "8192"},
        {"synthetic_eval_examples", "2048"}, {"image_size", "16"},
        {"image_channels", "1"},       {"bn_group_size", "8"},
        {"bn_momentum", "0.9"},        {"eval_every_epochs", "1"},
        {"eval_batch", "64"},
    };
    Preset rms{"toy-rmsprop-512", "toy", 8, 512, O::kRmsProp, 0.016, false, 1.0, toy_common};
    rms.extra.push_back({"total_epochs", "12"});
    Preset lars{"toy-lars-2048", "toy", 8, 2048, O::kLars, 0.5, true, 3.0, toy_common};
    lars.extra.push_back({"total_epochs", "12"});
    p.push_back(rms);
    p.push_back(lars);
    return p;
  }();
  return catalog;
}

inline const Preset& find_preset(std::string_view name) {
  for (const auto& p : preset_catalog()) {
    if (p.name == name) return p;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

inline void apply_preset(TrainConfig& c, const Preset& p) {
  c.model_tag = p.model_tag;
  c.num_replicas = p.num_replicas;
  c.global_batch = p.global_batch;
  c.per_core_batch = p.global_batch / p.num_replicas;
  c.optimizer = p.optimizer;
  c.lr_per_256 = p.lr_per_256;
  c.polynomial_decay = p.polynomial_decay;
  c.warmup_epochs = p.warmup_epochs;
  for (const auto& [k, v] : p.extra) find_key(k)->set(c, v);
}

// ---------------------------------------------------------------------------
// Parsing and serialization

// `key = value` per line, `#` starts a comment. A preset (if any) is applied
// first and explicit keys override it, so key order does not matter.
// Duplicate and unknown keys are errors.
inline TrainConfig parse_config(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(detail::trim(line.substr(0, eq)));
    const std::string value(detail::trim(line.substr(eq + 1)));
    if (key.empty() || value.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": empty key or value");
    }
    if (key != "preset" && !find_key(key)) {
      throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    if (!kv.emplace(key, value).second) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
  }

  TrainConfig c;
  const bool has_preset = kv.contains("preset");
  if (has_preset) {
    apply_preset(c, find_preset(kv.at("preset")));
  } else {
    std::vector<std::string> missing;
    for (const char* k : {"num_replicas", "optimizer", "lr_per_256"}) {
      if (!kv.contains(k)) missing.emplace_back(k);
    }
    if (!kv.contains("per_core_batch") && !kv.contains("global_batch")) {
      missing.emplace_back("per_core_batch|global_batch");
    }
    if (!missing.empty()) {
      std::string m = "required keys missing:";
      for (const auto& k : missing) m += " " + k;
      throw ConfigError(m);
    }
  }
  for (const auto& [k, v] : kv) {
    if (k != "preset") find_key(k)->set(c, v);
  }

  // Batch bookkeeping: B = N * b. An explicit per-core batch wins over a
  // preset's global batch; otherwise b follows from B / N.
  const bool explicit_b = kv.contains("per_core_batch");
  const bool explicit_B = kv.contains("global_batch");
  if (explicit_b && !explicit_B) {
    c.global_batch = c.num_replicas * c.per_core_batch;
  } else if (!explicit_b) {
    if (c.num_replicas == 0 || c.global_batch % c.num_replicas != 0) {
      throw ConfigError("global_batch " + std::to_string(c.global_batch) +
                        " is not divisible by num_replicas " + std::to_string(c.num_replicas));
    }
    c.per_core_batch = c.global_batch / c.num_replicas;
  }
  if (c.bn_grouping == Grouping::k2d && !kv.contains("bn_group_size")) {
    c.bn_group_size = c.tile_rows * c.tile_cols;
  }
  c.validate();
  return c;
}

// Every key written explicitly; parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const TrainConfig& c) {
  std::string out;
  for (const auto& k : config_keys()) {
    const std::string v = k.get(c);
    if (v.empty()) continue;
    out += k.name + " = " + v + "\n";
  }
  return out;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// Datasets

inline Dataset load_dataset_spec(const std::string& spec) {
  constexpr std::string_view kIdx = "idx:";
  if (spec.rfind(kIdx, 0) != 0) {
    throw ConfigError("dataset must be synthetic | idx:<images>,<labels>, got '" + spec + "'");
  }
  const std::string paths = spec.substr(kIdx.size());
  const auto comma = paths.find(',');
  if (comma == std::string::npos) {
    throw ConfigError("idx dataset needs '<images>,<labels>', got '" + paths + "'");
  }
  return load_idx(paths.substr(0, comma), paths.substr(comma + 1));
}

// Training and evaluation sets. Synthetic evaluation data shares the class
// templates but draws fresh noise and labels.
inline std::pair<Dataset, Dataset> make_datasets(const TrainConfig& c) {
  Dataset train;
  if (c.dataset == "synthetic") {
    train = gen_synthetic(c.synthetic_classes, c.synthetic_examples, c.image_size, c.image_size,
                          c.image_channels, c.seed);
  } else {
    train = load_dataset_spec(c.dataset);
  }
  Dataset eval;
  if (!c.eval_dataset.empty()) {
    eval = load_dataset_spec(c.eval_dataset);
    eval.num_classes = std::max(eval.num_classes, train.num_classes);
    train.num_classes = eval.num_classes;
  } else if (c.dataset == "synthetic") {
    eval = gen_synthetic(c.synthetic_classes, c.synthetic_eval_examples, c.image_size,
                         c.image_size, c.image_channels, c.seed, 1);
  } else {
    eval = train;
  }
  return {std::move(train), std::move(eval)};
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline constexpr std::string_view kMetricsHeader =
    "step,epoch,lr,train_loss,eval_top1,modeled_step_ms,allreduce_frac,elapsed_s";

inline std::string metrics_csv(const std::vector<MetricsRecord>& records) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const auto& r : records) {
    out += std::to_string(r.step) + ',' + format_double(r.epoch) + ',' + format_double(r.lr) +
           ',' + (r.train_loss ? format_double(*r.train_loss) : "") + ',' +
           (r.eval_top1 ? format_double(*r.eval_top1) : "") + ',' +
           format_double(r.modeled_step_ms) + ',' + format_double(r.allreduce_frac) + ',' +
           format_double(r.elapsed_s) + '\n';
  }
  return out;
}

inline std::vector<MetricsRecord> parse_metrics_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kMetricsHeader) {
    throw FormatError("metrics CSV: unexpected header");
  }
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 8) throw FormatError("metrics CSV: expected 8 fields in '" + line + "'");
    auto num = [](const std::string& s) { return detail::parse_double("metrics", s); };
    MetricsRecord r;
    r.step = static_cast<std::size_t>(detail::parse_uint("step", f[0]));
    r.epoch = num(f[1]);
    r.lr = num(f[2]);
    if (!f[3].empty()) r.train_loss = num(f[3]);
    if (!f[4].empty()) r.eval_top1 = num(f[4]);
    r.modeled_step_ms = num(f[5]);
    r.allreduce_frac = num(f[6]);
    r.elapsed_s = num(f[7]);
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Final-weights dump: a little-endian binary of every parameter followed by
// the batch-norm moving statistics.

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("weights: truncated");
  return v;
}
inline void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put_u64(os, name.size());
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u64(os, t.rank());
  for (std::size_t d : t.shape()) put_u64(os, d);
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(float)));
}
inline std::pair<std::string, Tensor> get_tensor(std::istream& is) {
  const std::uint64_t len = get_u64(is);
  if (len > 4096) throw FormatError("weights: implausible name length");
  std::string name(len, '\0');
  if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw FormatError("weights: truncated");
  const std::uint64_t rank = get_u64(is);
  if (rank > 8) throw FormatError("weights: implausible rank");
  Shape s(rank);
  for (auto& d : s) d = get_u64(is);
  Tensor t(s);
  if (!is.read(reinterpret_cast<char*>(t.data().data()),
               static_cast<std::streamsize>(t.size() * sizeof(float)))) {
    throw FormatError("weights: truncated");
  }
  return {std::move(name), std::move(t)};
}

}  // namespace detail

inline constexpr std::uint64_t kWeightsMagic = 0x315753424c42ULL;  // "LBSW1"

inline void save_weights(const std::string& path, const ReplicaState& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write weights '" + path + "'");
  detail::put_u64(os, kWeightsMagic);
  detail::put_u64(os, state.params.size());
  for (const auto& p : state.params) detail::put_tensor(os, p.name, p.value);
  detail::put_u64(os, state.bn_stats.size());
  for (const auto& [name, s] : state.bn_stats) {
    detail::put_tensor(os, name + "/moving_mean", s.mean);
    detail::put_tensor(os, name + "/moving_var", s.var);
  }
}

// Loads weights into a freshly initialized state for `model`, checking that
// every name and shape matches.
inline ReplicaState load_weights(const std::string& path, const Model& model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open weights '" + path + "'");
  if (detail::get_u64(is) != kWeightsMagic) throw FormatError("'" + path + "' is not a weights file");
  ReplicaState st = make_replicas(model, 1, 0).front();
  const std::uint64_t np = detail::get_u64(is);
  if (np != st.params.size()) throw FormatError("weights: parameter count mismatch");
  for (auto& p : st.params) {
    auto [name, t] = detail::get_tensor(is);
    if (name != p.name || t.shape() != p.value.shape()) {
      throw FormatError("weights: '" + name + "' does not match model parameter '" + p.name + "'");
    }
    p.value = std::move(t);
  }
  const std::uint64_t nb = detail::get_u64(is);
  if (nb != st.bn_stats.size()) throw FormatError("weights: batch-norm layer count mismatch");
  for (auto& [name, s] : st.bn_stats) {
    auto [n1, mean] = detail::get_tensor(is);
    auto [n2, var] = detail::get_tensor(is);
    if (n1 != name + "/moving_mean" || n2 != name + "/moving_var" ||
        mean.shape() != s.mean.shape() || var.shape() != s.var.shape()) {
      throw FormatError("weights: moving statistics for '" + name + "' do not match");
    }
    s.mean = std::move(mean);
    s.var = std::move(var);
  }
  return st;
}

// ---------------------------------------------------------------------------
// Bench CSV: model,cores,global_batch,throughput,allreduce_pct

inline std::vector<BenchRow> parse_bench_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) ||
      detail::trim(line) != "model,cores,global_batch,throughput,allreduce_pct") {
    throw FormatError("bench CSV: expected header model,cores,global_batch,throughput,allreduce_pct");
  }
  std::vector<BenchRow> rows;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.emplace_back(detail::trim(cell));
    if (f.size() != 5) throw FormatError("bench CSV: expected 5 fields in '" + line + "'");
    BenchRow r;
    r.model = f[0];
    r.cores = static_cast<std::size_t>(detail::parse_uint("cores", f[1]));
    r.global_batch = static_cast<std::size_t>(detail::parse_uint("global_batch", f[2]));
    r.throughput = detail::parse_double("throughput", f[3]);
    r.allreduce_pct = detail::parse_double("allreduce_pct", f[4]);
    if (r.cores == 0 || r.global_batch % r.cores != 0) {
      throw FormatError("bench CSV: global_batch must be a multiple of cores in '" + line + "'");
    }
    rows.push_back(r);
  }
  if (rows.empty()) throw FormatError("bench CSV: no rows");
  return rows;
}

}  // namespace lbsim
