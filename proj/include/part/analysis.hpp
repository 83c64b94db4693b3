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
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "part/data.hpp"
#include "part/modular_net.hpp"
#include "part/numerics.hpp"

namespace part {

struct SharingProfile {
  std::size_t tasks = 0;
  // histogram[t] = number of grid cells used by exactly t tasks, t in [0, k].
  std::vector<std::size_t> histogram;
  std::vector<std::vector<std::size_t>> per_layer;  // [layer][t]
  std::vector<std::vector<std::size_t>> usage;      // [layer][module] -> task count
};

SharingProfile sharing_profile(std::span<const Path> paths, std::size_t modules, std::size_t layers);

/// Expected number of cells shared by exactly `t` of `k` independently drawn
/// paths: L * M * C(k, t) p^t (1 - p)^(k - t) with p = N / M.
double expected_sharing_count(std::size_t layers, std::size_t modules, std::size_t picks, std::size_t k,
                              std::size_t t);

/// Biased HSIC: tr(K H L H) / (n - 1)^2 with H = I - 11^T / n.
double hsic(const Matrix& K, const Matrix& L);

struct Kernel {
  enum class Kind { linear, rbf };
  Kind kind = Kind::linear;
  // RBF bandwidth. As a fraction it multiplies the median pairwise distance
  // of each representation; otherwise it is used as-is.
  double sigma = 0.5;
  bool sigma_is_fraction = true;

  static Kernel linear() { return {}; }
  static Kernel rbf(double sigma, bool fraction = true) { return {Kind::rbf, sigma, fraction}; }
  std::string describe() const;
  bool operator==(const Kernel&) const = default;
};

/// Gram matrix of the rows of X. Returns nullopt when an RBF bandwidth
/// would be zero (all rows identical).
std::optional<Matrix> gram_matrix(const Matrix& X, const Kernel& kernel);

struct CkaValue {
  double value = 0.0;
  bool defined = false;
  std::string reason;  // set when undefined

  static CkaValue undefined(std::string why) { return {std::numeric_limits<double>::quiet_NaN(), false, std::move(why)}; }
};

CkaValue cka(const Matrix& X, const Matrix& Y, const Kernel& kernel);
CkaValue cka_from_grams(const Matrix& Kx, const Matrix& Ky);

/// Linear CKA in feature space: ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)
/// after centering columns.
double linear_cka_features(const Matrix& X, const Matrix& Y);

struct ActivationSet {
  std::size_t task = 0;
  std::size_t layer = 0;
  Matrix rep;                          // summed layer output h_{l+1}
  std::vector<std::size_t> modules;    // selected modules, path order
  std::vector<Matrix> module_reps;     // per selected module
};

/// Eval-mode capture of every layer for exactly `n` class-balanced samples.
std::vector<ActivationSet> capture_activations(const ModuleGrid& grid, const TaskSpec& task,
                                               const Dataset& samples, std::size_t n);

/// All-pairs CKA among the modules of both tasks at one layer.
struct ModulePairMatrix {
  std::vector<std::string> labels;  // "t<task>:m<module>"
  std::vector<std::size_t> tasks;
  std::vector<std::size_t> modules;
  Matrix values;  // symmetric; NaN where undefined
};

struct CkaReport {
  std::string setup;
  Kernel kernel;
  std::size_t task_a = 0;
  std::size_t task_b = 1;
  std::vector<CkaValue> layer_cka;
  std::vector<ModulePairMatrix> module_pairs;
  std::vector<std::vector<std::size_t>> shared_modules;  // per layer
  std::size_t runs = 1;

  /// Mean of the interior layers above both the first and last layer.
  /// Empty with fewer than three layers or any undefined value.
  std::optional<bool> middle_more_similar() const;
};

CkaReport layerwise_cka_report(std::span<const ActivationSet> set_a, std::span<const ActivationSet> set_b,
                               const Kernel& kernel, std::string setup);

/// Averages CKA values entrywise over runs of the same setup.
CkaReport average_reports(std::span<const CkaReport> reports);

double clamp_for_display(double cka_value);

nlohmann::json to_json(const SharingProfile& profile);
nlohmann::json to_json(const CkaReport& report);
/// Rows/cols are module labels; the trailing comment lists shared modules.
void write_heatmap_csv(const CkaReport& report, std::size_t layer, const std::filesystem::path& path);

}  // namespace part
