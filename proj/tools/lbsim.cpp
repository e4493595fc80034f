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

// lbsim command line: train | eval | gradcheck | bench | presets.
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "lbsim/config.hpp"
#include "lbsim/gradcheck.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw lbsim::Error("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  if (path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw lbsim::Error("cannot write '" + path + "'");
  out << text;
}

int cmd_train(const std::string& config_path, const std::string& out_path,
              const std::string& weights_out, std::size_t workers, bool wallclock) {
  const lbsim::TrainConfig cfg = lbsim::load_config(config_path);
  const auto [train, eval] = lbsim::make_datasets(cfg);
  lbsim::RunOptions opt;
  opt.workers = workers;
  opt.wallclock = wallclock;
  const auto result = lbsim::run(cfg, train, eval, opt);
  write_text(out_path, lbsim::metrics_csv(result.records));
  if (!weights_out.empty()) lbsim::save_weights(weights_out, result.replicas.front());
  if (result.diverged) {
    std::cerr << "lbsim train: " << result.diagnostic << "\n";
    return kRuntime;
  }
  const auto peak = lbsim::time_to_peak(result.records);
  std::cerr << "replicas=" << cfg.num_replicas << " global_batch=" << cfg.global_batch
            << " bn_batch=" << cfg.bn_batch_size() << " steps=" << result.records.back().step
            << " peak_top1=" << lbsim::format_double(peak.peak_top1)
            << " modeled_minutes_to_peak=" << lbsim::format_double(peak.time) << "\n";
  return kOk;
}

int cmd_eval(const std::string& config_path, const std::string& weights, std::size_t workers) {
  const lbsim::TrainConfig cfg = lbsim::load_config(config_path);
  const auto [train, eval] = lbsim::make_datasets(cfg);
  const lbsim::Model model(lbsim::model_layers(cfg.model, train.num_classes),
                           train.example_shape());
  const auto state = lbsim::load_weights(weights, model);
  const double top1 = lbsim::distributed_eval(model, state.params, state.bn_stats, eval,
                                              cfg.num_replicas, cfg.eval_batch, cfg.bn(),
                                              cfg.precision, workers);
  std::cout << "top1," << lbsim::format_double(top1) << "\n";
  return kOk;
}

// Checks the configured model on a two-replica BN group of 4 examples each.
int cmd_gradcheck(const std::string& config_path, double eps) {
  const lbsim::TrainConfig cfg = lbsim::load_config(config_path);
  const std::size_t classes = cfg.synthetic_classes;
  const auto data = lbsim::gen_synthetic(classes, 4, cfg.image_size, cfg.image_size,
                                         cfg.image_channels, cfg.seed);
  const lbsim::Model model(lbsim::model_layers(cfg.model, classes), data.example_shape());
  const auto params = model.init_params(cfg.seed);
  std::vector<lbsim::Tensor> xs;
  std::vector<std::vector<int>> ys;
  for (std::size_t r = 0; r < 2; ++r) {
    const std::size_t idx[] = {2 * r, 2 * r + 1};
    auto [x, y] = data.batch(idx);
    xs.push_back(std::move(x));
    ys.push_back(std::move(y));
  }
  const auto res = lbsim::grad_check(model, params, xs, ys, eps, cfg.bn());
  std::cout << "max_rel_err," << lbsim::format_double(res.max_rel_err) << "\n"
            << "elements," << res.elements_checked << "\n"
            << "worst," << res.worst_param << "[" << res.worst_index << "]\n";
  if (!(res.max_rel_err < 1e-3)) {
    std::cerr << "lbsim gradcheck: max_rel_err " << res.max_rel_err << " >= 1e-3\n";
    return kRuntime;
  }
  return kOk;
}

int cmd_bench(const std::string& table_path, const std::string& out_path,
              std::size_t fit_max_cores, const std::map<std::string, double>& param_bytes) {
  const auto rows = lbsim::parse_bench_csv(read_text(table_path));
  std::map<std::string, std::vector<lbsim::BenchRow>> by_model;
  for (const auto& r : rows) by_model[r.model];
  std::map<std::string, lbsim::CostModelParams> fitted;
  for (auto& [model, fit_rows] : by_model) {
    for (const auto& r : rows) {
      if (r.model == model && (fit_max_cores == 0 || r.cores <= fit_max_cores)) {
        fit_rows.push_back(r);
      }
    }
    const auto it = param_bytes.find(model);
    const double bytes =
        it != param_bytes.end() ? it->second : lbsim::default_param_bytes(model);
    fitted[model] = lbsim::calibrate(fit_rows, bytes);
  }
  using lbsim::format_double;
  std::string out =
      "model,cores,global_batch,throughput,allreduce_pct,fitted,pred_throughput,"
      "pred_allreduce_pct,throughput_rel_err,per_image_compute_ms,param_bytes,"
      "link_bandwidth_bytes_per_ms,per_hop_latency_ms\n";
  for (const auto& r : rows) {
    const auto& p = fitted.at(r.model);
    const auto pred = lbsim::predict(r.per_core_batch(), r.cores, p);
    const bool used = fit_max_cores == 0 || r.cores <= fit_max_cores;
    out += r.model + ',' + std::to_string(r.cores) + ',' + std::to_string(r.global_batch) + ',' +
           format_double(r.throughput) + ',' + format_double(r.allreduce_pct) + ',' +
           (used ? "1" : "0") + ',' + format_double(pred.throughput) + ',' +
           format_double(pred.allreduce_pct) + ',' +
           format_double((pred.throughput - r.throughput) / r.throughput) + ',' +
           format_double(p.per_image_compute_ms) + ',' + format_double(p.param_bytes) + ',' +
           format_double(p.link_bandwidth_bytes_per_ms) + ',' +
           format_double(p.per_hop_latency_ms) + '\n';
  }
  write_text(out_path, out);
  return kOk;
}

int cmd_presets() {
  std::cout << "name,model,cores,global_batch,optimizer,lr_per_256,decay,warmup_epochs\n";
  for (const auto& p : lbsim::preset_catalog()) {
    std::cout << p.name << ',' << p.model_tag << ',' << p.num_replicas << ',' << p.global_batch
              << ',' << (p.optimizer == lbsim::OptimizerKind::kLars ? "lars" : "rmsprop") << ','
              << lbsim::format_double(p.lr_per_256) << ','
              << (p.polynomial_decay ? "polynomial" : "exponential") << ','
              << lbsim::format_double(p.warmup_epochs) << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lbsim: large-batch data-parallel training simulator", "lbsim"};
  app.require_subcommand(1);

  std::string config, out = "-", weights, weights_out, table;
  std::size_t workers = 1, fit_max_cores = 0;
  bool wallclock = false;
  double eps = 1e-3;
  std::map<std::string, double> param_bytes;

  auto* train = app.add_subcommand("train", "run distributed training, write metrics CSV");
  train->add_option("--config", config, "experiment config file")->required();
  train->add_option("--out", out, "metrics CSV path ('-' for stdout)");
  train->add_option("--weights-out", weights_out, "write final weights here");
  train->add_option("--workers", workers, "host threads for replica work")->check(CLI::PositiveNumber);
  train->add_flag("--wallclock", wallclock, "elapsed_s from the host clock (not reproducible)");

  auto* eval = app.add_subcommand("eval", "distributed evaluation of saved weights");
  eval->add_option("--config", config, "experiment config file")->required();
  eval->add_option("--weights", weights, "weights file from train --weights-out")->required();
  eval->add_option("--workers", workers, "host threads")->check(CLI::PositiveNumber);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the configured model");
  gc->add_option("--config", config, "experiment config file")->required();
  gc->add_option("--eps", eps, "central-difference step")->check(CLI::PositiveNumber);

  auto* bench = app.add_subcommand("bench", "calibrate the cost model on a throughput table");
  bench->add_option("--table", table, "CSV: model,cores,global_batch,throughput,allreduce_pct")
      ->required();
  bench->add_option("--out", out, "output CSV path ('-' for stdout)");
  bench->add_option("--fit-max-cores", fit_max_cores,
                    "fit only rows with at most this many cores (0: all rows)");
  bench->add_option("--param-bytes", param_bytes, "model=bytes overrides for weight size");

  app.add_subcommand("presets", "list the preset catalog");

  if (argc > 1 && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
    std::cerr << "lbsim: unknown subcommand '" << argv[1] << "'\n" << app.help();
    return kUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "lbsim: " << e.what() << "\n" << app.help();
    return kUsage;
  }

  try {
    if (*train) return cmd_train(config, out, weights_out, workers, wallclock);
    if (*eval) return cmd_eval(config, weights, workers);
    if (*gc) return cmd_gradcheck(config, eps);
    if (*bench) return cmd_bench(table, out, fit_max_cores, param_bytes);
    return cmd_presets();
  } catch (const lbsim::ConfigError& e) {
    std::cerr << "lbsim: config error: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "lbsim: " << e.what() << "\n";
    return kRuntime;
  }
}
