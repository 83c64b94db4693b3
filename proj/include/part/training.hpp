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
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "part/modular_net.hpp"
#include "part/numerics.hpp"
#include "part/random.hpp"

namespace part {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::size_t batch_set_size = 10;
  double lr0 = 1e-3;
  std::vector<std::size_t> lr_halve_epochs{20, 30, 40};
  std::uint64_t seed = 0;
  NormMode norm_mode = NormMode::per_task;

  /// Throws InputError on lr0 <= 0, zero sizes or unsorted halving epochs.
  void validate() const;
};

/// lr0 * 2^-(number of halving epochs <= epoch); epochs count from 1.
double learning_rate_at(const TrainConfig& cfg, std::size_t epoch);

/// Per-epoch bucket of tasks that still have untrained batches.
class EpochScheduler {
 public:
  struct Grant {
    std::size_t task = 0;
    std::size_t batches = 0;
  };

  EpochScheduler(std::vector<std::size_t> batches_per_task, std::size_t batch_set_size);

  /// Picks a task uniformly among those with batches left and grants
  /// min(batch_set_size, remaining) of them. Empty once the epoch is over.
  std::optional<Grant> schedule_round(Rng& rng);

  const std::vector<std::size_t>& remaining() const noexcept { return remaining_; }
  bool epoch_done() const noexcept;

 private:
  std::vector<std::size_t> remaining_;
  std::size_t batch_set_size_;
};

/// One Adam state per parameter tensor. Blocks and shared norm instances are
/// shared by every task that trains them; head slices belong to one task.
class AdamBank {
 public:
  /// Applies `grads` at learning rate `lr`, skipping frozen tensors.
  void apply(ModuleGrid& grid, const TaskGradients& grads, double lr);

  std::size_t tensor_count() const noexcept { return states_.size(); }

 private:
  // (kind, a, b, c, which): kind 0 block, 1 norm, 2 head.
  using Key = std::tuple<int, std::size_t, std::size_t, std::size_t, int>;
  void update(const Key& key, Matrix& params, const Matrix& grads, double lr);

  std::map<Key, AdamState> states_;
};

struct TaskEpochStats {
  std::optional<double> loss;  // absent when the task was not trained that epoch
  double val_acc = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::vector<TaskEpochStats> per_task;
};

struct TaskSummary {
  std::size_t id = 0;
  std::size_t classes = 0;
  Slice slice;
};

struct RunReport {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string mode;
  std::vector<TaskSummary> tasks;
  std::vector<EpochRecord> epochs;
  std::vector<double> final_acc;
  double wallclock_s = 0.0;

  /// Best per-task validation accuracy over the recorded epochs.
  std::vector<double> best_acc() const;
  double mean_final_acc() const;
};

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax_lowest(std::span<const double> values);

/// Eval-mode accuracy of a task on its validation set, argmax within its slice.
double validate(const ModuleGrid& grid, const TaskSpec& task);
double accuracy(const ModuleGrid& grid, const TaskSpec& task, const Dataset& ds);

/// Interleaved training of every task on its own path; nothing is frozen.
RunReport train_parallel(ModuleGrid& grid, const std::vector<TaskSpec>& tasks, const TrainConfig& cfg);

using FreezeCallback = std::function<void(const ModuleGrid&, std::size_t task)>;

/// Tasks one after another, each for cfg.epochs; afterwards its path, norm
/// instances and head slice are frozen. `on_frozen` runs right after each freeze.
RunReport train_sequential(ModuleGrid& grid, const std::vector<TaskSpec>& tasks, const TrainConfig& cfg,
                           const FreezeCallback& on_frozen = {});

/// Trains only tasks[task_index]; every task is still validated.
RunReport train_single(ModuleGrid& grid, const std::vector<TaskSpec>& tasks, std::size_t task_index,
                       const TrainConfig& cfg);

}  // namespace part
