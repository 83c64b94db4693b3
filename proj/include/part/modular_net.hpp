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
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "part/data.hpp"
#include "part/numerics.hpp"
#include "part/random.hpp"

namespace part {

enum class NormMode { shared, per_task };
enum class Mode { train, eval };

std::string to_string(NormMode mode);
NormMode norm_mode_from_string(const std::string& s);

/// Batch-normalization parameters and running statistics for one feature width.
struct NormInstance {
  Matrix gamma;     // 1×d
  Matrix beta;      // 1×d
  Matrix run_mean;  // 1×d
  Matrix run_var;   // 1×d
  double momentum = 0.1;

  static NormInstance identity(std::size_t width);
  bool operator==(const NormInstance&) const = default;
};

/// One grid cell: affine map followed by normalization and ReLU.
struct ModuleBlock {
  Matrix W;  // fan_in×d_hid
  Matrix b;  // 1×d_hid
  // Shared mode: exactly one instance. Per-task mode: one per task, by task id.
  std::vector<NormInstance> norms;
};

/// For each layer, the sorted module indices a task runs through.
struct Path {
  std::vector<std::vector<std::size_t>> selection;

  std::size_t layers() const noexcept { return selection.size(); }
  bool uses(std::size_t layer, std::size_t module) const;
  bool operator==(const Path&) const = default;
};

struct TaskSpec {
  std::size_t id = 0;
  std::size_t classes = 0;
  Slice slice;
  Path path;
  std::shared_ptr<const Dataset> train_ds;
  std::shared_ptr<const Dataset> val_ds;
};

struct GridShape {
  std::size_t layers = 1;
  std::size_t modules = 1;
  std::size_t d_in = 1;
  std::size_t d_hid = 1;
  bool operator==(const GridShape&) const = default;
};

/// Which cells, tasks and head columns have stopped training.
struct FrozenSet {
  std::set<std::pair<std::size_t, std::size_t>> blocks;  // (layer, module)
  std::set<std::size_t> tasks;
  bool operator==(const FrozenSet&) const = default;
};

/// Registry entry kept by the grid; TaskSpec adds dataset handles on top.
struct TaskEntry {
  std::size_t classes = 0;
  Slice slice;
  Path path;  // empty until assigned
};

class ModuleGrid {
 public:
  ModuleGrid(GridShape shape, NormMode norm_mode, std::uint64_t seed);

  const GridShape& shape() const noexcept { return shape_; }
  NormMode norm_mode() const noexcept { return norm_mode_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t total_classes() const noexcept { return head_W_.cols(); }
  std::size_t task_count() const noexcept { return tasks_.size(); }
  const std::vector<TaskEntry>& tasks() const noexcept { return tasks_; }

  const ModuleBlock& block(std::size_t layer, std::size_t module) const;
  ModuleBlock& mutable_block(std::size_t layer, std::size_t module);
  const Matrix& head_W() const noexcept { return head_W_; }
  const Matrix& head_b() const noexcept { return head_b_; }
  Matrix& mutable_head_W() { ++revision_; return head_W_; }
  Matrix& mutable_head_b() { ++revision_; return head_b_; }

  /// Index into ModuleBlock::norms used by a task.
  std::size_t norm_index(std::size_t task) const noexcept {
    return norm_mode_ == NormMode::per_task ? task : 0;
  }

  /// Appends a task: widens the head by `classes` fresh columns and, in
  /// per-task mode, adds a norm instance to every block.
  TaskSpec register_task(std::size_t classes);
  void assign_path(std::size_t task, const Path& path);
  /// TaskSpec view of a registered task (no dataset handles).
  TaskSpec task_spec(std::size_t task) const;

  void freeze_path(const Path& path);
  void freeze_task(std::size_t task);
  bool is_frozen(std::size_t layer, std::size_t module) const;
  bool is_task_frozen(std::size_t task) const;
  const FrozenSet& frozen() const noexcept { return frozen_; }
  /// Whether a norm instance may change: shared instances follow their
  /// block, per-task instances follow their task.
  bool is_norm_frozen(std::size_t layer, std::size_t module, std::size_t instance) const;

  /// Throws InputError when `task` does not match the registry.
  void require_registered(const TaskSpec& task) const;

  /// Bumped by every parameter mutation; tapes remember it.
  std::uint64_t revision() const noexcept { return revision_; }

  /// Rebuilds a grid from checkpoint metadata; parameters are filled afterwards.
  static ModuleGrid restore(GridShape shape, NormMode norm_mode, std::uint64_t seed,
                            std::vector<TaskEntry> tasks, FrozenSet frozen);

 private:
  friend struct ForwardPass;

  GridShape shape_;
  NormMode norm_mode_;
  std::uint64_t seed_;
  std::vector<std::vector<ModuleBlock>> layers_;
  Matrix head_W_;  // d_hid×C_total
  Matrix head_b_;  // 1×C_total
  std::vector<TaskEntry> tasks_;
  FrozenSet frozen_;
  std::uint64_t revision_ = 0;
};

/// Per-module record from a forward pass.
struct ModuleTrace {
  std::size_t module = 0;
  Matrix x_hat;    // normalized pre-activation
  Matrix inv_std;  // 1×d_hid
  Matrix y;        // gamma * x_hat + beta
  Matrix out;      // relu(y)
};

struct Tape {
  std::size_t task = 0;
  Mode mode = Mode::eval;
  std::uint64_t revision = 0;
  std::size_t batch = 0;
  std::vector<Matrix> h;                         // h[0] = x, h[l+1] = output of layer l
  std::vector<std::vector<ModuleTrace>> modules; // per layer, in path order
};

struct ForwardResult {
  Matrix logits;  // n×classes of the task's slice
  Tape tape;
};

/// Train mode normalizes with batch statistics and updates the running
/// statistics of non-frozen norm instances; eval mode uses running statistics.
ForwardResult forward_task(ModuleGrid& grid, const TaskSpec& task, const Matrix& x, Mode mode);
/// Eval-mode forward on an immutable grid.
ForwardResult forward_task(const ModuleGrid& grid, const TaskSpec& task, const Matrix& x);

struct BlockGrad {
  std::size_t layer = 0;
  std::size_t module = 0;
  Matrix dW;
  Matrix db;
};

struct NormGrad {
  std::size_t layer = 0;
  std::size_t module = 0;
  std::size_t instance = 0;
  Matrix dgamma;
  Matrix dbeta;
};

/// Gradients for everything a task touches and nothing else.
struct TaskGradients {
  std::size_t task = 0;
  Slice slice;
  std::vector<BlockGrad> blocks;
  std::vector<NormGrad> norms;
  Matrix head_W;  // d_hid×classes, columns of the task's slice
  Matrix head_b;  // 1×classes
};

/// dlogits is n×classes (the slice only).
TaskGradients backward_task(const ModuleGrid& grid, const TaskSpec& task, const Tape& tape,
                            const Matrix& dlogits);

Path assign_random_path(std::size_t modules, std::size_t picks, std::size_t layers, Rng& rng);

/// Two hand-built paths over M = 2N modules: both take modules [0, N) in
/// `shared_layers`; elsewhere A takes [0, N) and B takes [N, 2N).
std::pair<Path, Path> build_controlled_paths(std::size_t layers, std::size_t modules,
                                             std::size_t picks,
                                             const std::set<std::size_t>& shared_layers);

/// Parses setup labels such as "no layer", "layer 1", "layer 123" into
/// 0-based layer indices.
std::set<std::size_t> parse_sharing_setup(const std::string& label);
std::string sharing_setup_label(const std::set<std::size_t>& shared_layers);

/// Canonical order: layer-major, module-minor; per block W (row-major), b,
/// then its norm instances by index (gamma, beta, run_mean, run_var); then
/// head_W (row-major) and head_b.
std::vector<double> parameter_blob(const ModuleGrid& grid);
void set_parameter_blob(ModuleGrid& grid, std::span<const double> blob);
std::size_t parameter_blob_size(const ModuleGrid& grid);

/// Same order as parameter_blob but without running statistics.
std::vector<double> trainable_parameters(const ModuleGrid& grid);
void set_trainable_parameters(ModuleGrid& grid, std::span<const double> values);
/// Dense gradient in trainable_parameters order; zero where `grads` is silent.
std::vector<double> flatten_gradients(const ModuleGrid& grid, const TaskGradients& grads);

/// FNV-1a over the bytes of a block's W, b and its shared norm instance.
std::uint64_t block_fingerprint(const ModuleGrid& grid, std::size_t layer, std::size_t module);

}  // namespace part
