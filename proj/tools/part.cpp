// Copyright 2026 The PaRT Lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "part/analysis.hpp"
#include "part/checkpoint.hpp"
#include "part/data.hpp"
#include "part/errors.hpp"
#include "part/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

void print_epochs(const part::RunReport& report) {
  for (const auto& e : report.epochs) {
    std::printf("epoch %3zu  lr %.2e ", e.epoch, e.lr);
    for (std::size_t t = 0; t < e.per_task.size(); ++t) {
      const auto& p = e.per_task[t];
      if (p.loss) {
        std::printf(" | t%zu loss %.4f acc %.3f", t, *p.loss, p.val_acc);
      } else {
        std::printf(" | t%zu acc %.3f", t, p.val_acc);
      }
    }
    std::printf("\n");
  }
}

part::RunReport read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw part::InputError("cannot open report " + path.string());
  try {
    return part::report_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw part::ParseError(path.string() + ": " + e.what());
  }
}

int cmd_gen_data(const std::string& config_path, const std::string& out) {
  const auto cfg = part::load_config(config_path);
  const fs::path dir = out.empty() ? cfg.output_dir / "data" : fs::path(out);
  fs::create_directories(dir);
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    const auto& tc = cfg.tasks[i];
    if (!tc.synthetic) continue;
    part::Rng rng = part::make_rng(cfg.effective_data_seed(), "data", i);
    const auto split = part::gen_synthetic_task(rng, tc.synthetic->classes, tc.synthetic->n_per_class, cfg.grid.d_in,
                                                tc.synthetic->margin, tc.name);
    const fs::path train = dir / ("task" + std::to_string(i) + "_train.csv");
    const fs::path val = dir / ("task" + std::to_string(i) + "_val.csv");
    part::save_csv(split.train, train);
    part::save_csv(split.val, val);
    std::printf("%s: %s (%zu), %s (%zu)\n", tc.name.c_str(), train.c_str(), split.train.size(), val.c_str(),
                split.val.size());
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& mode, const std::string& out) {
  auto cfg = part::load_config(config_path);
  if (!mode.empty()) cfg.mode = part::run_mode_from_string(mode);
  if (!out.empty()) cfg.output_dir = out;
  auto exp = part::prepare_experiment(cfg);
  const auto report = part::run_training(exp, cfg);
  print_epochs(report);

  fs::create_directories(cfg.output_dir);
  std::ofstream(cfg.output_dir / "report.json") << part::report_to_json(report).dump(2) << '\n';
  part::save_checkpoint(exp.grid, cfg.output_dir / "checkpoint.part");
  if (cfg.analysis.cka || cfg.analysis.sharing_profile) {
    part::write_analysis(part::analyze_grids({&exp.grid}, cfg), cfg.output_dir);
  }
  std::printf("mode %s  mean final acc %.4f  -> %s\n", report.mode.c_str(), report.mean_final_acc(),
              cfg.output_dir.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& config_path) {
  const auto cfg = part::load_config(config_path);
  const auto grid = part::load_checkpoint(ckpt);
  const auto tasks = part::bind_tasks(grid, cfg);
  json out = json::array();
  for (const auto& t : tasks) {
    const double acc = part::validate(grid, t);
    out.push_back({{"task", t.id}, {"val_acc", acc}});
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_analyze(const std::vector<std::string>& ckpts, const std::string& config_path, const std::string& out) {
  auto cfg = part::load_config(config_path);
  if (!cfg.analysis.cka && !cfg.analysis.sharing_profile) cfg.analysis.cka = true;
  std::vector<part::ModuleGrid> grids;
  for (const auto& c : ckpts) grids.push_back(part::load_checkpoint(c));
  std::vector<const part::ModuleGrid*> views;
  for (const auto& g : grids) views.push_back(&g);
  const auto art = part::analyze_grids(views, cfg);
  const fs::path dir = out.empty() ? cfg.output_dir / "analysis" : fs::path(out);
  part::write_analysis(art, dir);
  if (art.cka) {
    for (std::size_t l = 0; l < art.cka->layer_cka.size(); ++l) {
      const auto& v = art.cka->layer_cka[l];
      if (v.defined) {
        std::printf("layer %zu  cka %.4f\n", l + 1, v.value);
      } else {
        std::printf("layer %zu  cka undefined (%s)\n", l + 1, v.reason.c_str());
      }
    }
  }
  std::printf("analysis written to %s\n", dir.c_str());
  return 0;
}

int cmd_compare(const std::string& a, const std::string& b, const std::string& out) {
  const auto cmp = part::compare_reports(read_report(a), read_report(b));
  std::cout << part::format_comparison(cmp);
  if (!out.empty()) std::ofstream(out) << part::to_json(cmp).dump(2) << '\n';
  return 0;
}

int cmd_profile(const std::string& config_path) {
  const auto cfg = part::load_config(config_path);
  const auto paths = part::config_paths(cfg);
  const auto profile = part::sharing_profile(paths, cfg.grid.modules, cfg.grid.layers);
  json doc{{"profile", part::to_json(profile)}};
  const std::size_t k = cfg.tasks.size();
  json expected = json::object();
  for (std::size_t t = 0; t <= k; ++t) {
    expected[std::to_string(t)] = part::expected_sharing_count(cfg.grid.layers, cfg.grid.modules, cfg.picks, k, t);
  }
  doc["binomial_expectation"] = expected;
  if (cfg.analysis.trials > 0) {
    std::vector<double> mean(k + 1, 0.0);
    part::Rng rng = part::make_rng(cfg.seed, "profile-trials");
    for (std::size_t r = 0; r < cfg.analysis.trials; ++r) {
      std::vector<part::Path> draw;
      for (std::size_t i = 0; i < k; ++i) {
        draw.push_back(part::assign_random_path(cfg.grid.modules, cfg.picks, cfg.grid.layers, rng));
      }
      const auto p = part::sharing_profile(draw, cfg.grid.modules, cfg.grid.layers);
      for (std::size_t t = 0; t <= k; ++t) mean[t] += static_cast<double>(p.histogram[t]);
    }
    json mc = json::object();
    for (std::size_t t = 0; t <= k; ++t) mc[std::to_string(t)] = mean[t] / static_cast<double>(cfg.analysis.trials);
    doc["monte_carlo_mean"] = mc;
    doc["trials"] = cfg.analysis.trials;
  }
  fs::create_directories(cfg.output_dir);
  std::ofstream(cfg.output_dir / "sharing_profile.json") << doc.dump(2) << '\n';
  std::cout << doc.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parallel multi-task training on a module grid"};
  app.require_subcommand(1);

  std::string config;
  std::string mode;
  std::string out;
  std::string ckpt;
  std::vector<std::string> ckpts;
  std::string report_a;
  std::string report_b;

  auto* gen = app.add_subcommand("gen-data", "Write synthetic task datasets as CSV");
  gen->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "Output directory (default: <output_dir>/data)");

  auto* train = app.add_subcommand("train", "Train and write report.json plus a checkpoint");
  train->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--mode", mode, "parallel|sequential|single (overrides config)")
      ->check(CLI::IsMember({"parallel", "sequential", "single"}));
  train->add_option("--out", out, "Output directory (overrides config)");

  auto* eval = app.add_subcommand("eval", "Validation accuracy of a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);

  auto* analyze = app.add_subcommand("analyze", "CKA and module-sharing analysis of checkpoints");
  analyze->add_option("--ckpt", ckpts, "Checkpoint file; repeat to average over runs")->required()
      ->check(CLI::ExistingFile);
  analyze->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  analyze->add_option("--out", out, "Output directory (default: <output_dir>/analysis)");

  auto* compare = app.add_subcommand("compare", "Per-task accuracy deltas between two reports");
  compare->add_option("A", report_a, "First report.json")->required()->check(CLI::ExistingFile);
  compare->add_option("B", report_b, "Second report.json")->required()->check(CLI::ExistingFile);
  compare->add_option("--out", out, "Also write the delta table as JSON");

  auto* profile = app.add_subcommand("profile-sharing", "Module sharing profile of the config's paths");
  profile->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_data(config, out);
    if (*train) return cmd_train(config, mode, out);
    if (*eval) return cmd_eval(ckpt, config);
    if (*analyze) return cmd_analyze(ckpts, config, out);
    if (*compare) return cmd_compare(report_a, report_b, out);
    if (*profile) return cmd_profile(config);
  } catch (const part::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const part::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
