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

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "part/analysis.hpp"
#include "part/errors.hpp"
#include "part/modular_net.hpp"
#include "part/training.hpp"

namespace part {

/// Invalid experiment configuration; the message names the offending field.
class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

struct SyntheticTaskConfig {
  std::size_t classes = 4;
  std::size_t n_per_class = 100;
  double margin = 6.0;
};

struct TaskConfig {
  std::string name;
  std::optional<SyntheticTaskConfig> synthetic;
  std::filesystem::path train_csv;  // used when `synthetic` is empty
  std::filesystem::path val_csv;
};

struct AnalysisConfig {
  bool cka = false;
  bool sharing_profile = false;
  Kernel kernel = Kernel::rbf(0.5, true);
  std::size_t capture_n = 200;
  std::size_t task_a = 0;
  std::size_t task_b = 1;
  std::size_t trials = 0;  // Monte-Carlo path draws for profile-sharing
};

enum class RunMode { parallel, sequential, single };
std::string to_string(RunMode mode);
RunMode run_mode_from_string(const std::string& s);

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> data_seed;  // defaults to seed
  RunMode mode = RunMode::parallel;
  std::size_t single_task = 0;
  GridShape grid{4, 6, 16, 32};
  std::size_t picks = 3;
  NormMode norm_mode = NormMode::per_task;
  TrainConfig train;
  std::vector<TaskConfig> tasks;
  // Empty: random paths. Otherwise a two-task sharing setup label such as "layer 123".
  std::string controlled_setup;
  AnalysisConfig analysis;
  std::filesystem::path output_dir = "out";

  std::uint64_t effective_data_seed() const { return data_seed.value_or(seed); }
};

/// Parses and validates; `base_dir` resolves relative CSV paths.
ExperimentConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON with every default filled in.
nlohmann::json config_to_json(const ExperimentConfig& cfg);
/// Hex FNV-1a of the canonical config minus output_dir.
std::string config_hash(const ExperimentConfig& cfg);

struct TaskData {
  Dataset train;
  Dataset val;
};

/// Generated or loaded task data, standardized per task; training sets
/// oversampled to equal size.
std::vector<TaskData> build_task_data(const ExperimentConfig& cfg);

struct Experiment {
  ModuleGrid grid;
  std::vector<TaskSpec> tasks;
};

/// Fresh grid with every task registered, pathed and bound to its data.
Experiment prepare_experiment(const ExperimentConfig& cfg);
/// Binds regenerated data to the tasks stored in a checkpointed grid.
std::vector<TaskSpec> bind_tasks(const ModuleGrid& grid, const ExperimentConfig& cfg);

std::vector<Path> config_paths(const ExperimentConfig& cfg);

RunReport run_training(Experiment& exp, const ExperimentConfig& cfg, const FreezeCallback& on_frozen = {});

nlohmann::json report_to_json(const RunReport& report);
RunReport report_from_json(const nlohmann::json& doc);

struct TaskDelta {
  std::size_t task = 0;
  double acc_a = 0.0;
  double acc_b = 0.0;
  double delta = 0.0;  // a - b
};

struct Comparison {
  std::vector<TaskDelta> per_task;
  double mean_a = 0.0;
  double mean_b = 0.0;
  double mean_delta = 0.0;
};

/// Throws InputError unless both reports cover the same tasks.
Comparison compare_reports(const RunReport& a, const RunReport& b);
nlohmann::json to_json(const Comparison& c);
std::string format_comparison(const Comparison& c);

struct AnalysisArtifacts {
  std::optional<CkaReport> cka;
  std::optional<SharingProfile> sharing;
};

/// CKA between analysis.task_a and analysis.task_b on class-balanced
/// validation samples, averaged over all grids given.
AnalysisArtifacts analyze_grids(const std::vector<const ModuleGrid*>& grids, const ExperimentConfig& cfg);
/// Writes cka_report.json, heatmap_layer<l>.csv and sharing_profile.json.
void write_analysis(const AnalysisArtifacts& art, const std::filesystem::path& dir);

}  // namespace part
