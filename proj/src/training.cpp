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

#include "part/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "part/data.hpp"
#include "part/errors.hpp"

namespace part {

void TrainConfig::validate() const {
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw InputError("lr0 must be positive");
  if (batch_size == 0) throw InputError("batch_size must be positive");
  if (batch_set_size == 0) throw InputError("batch_set_size must be positive");
  for (std::size_t i = 1; i < lr_halve_epochs.size(); ++i) {
    if (lr_halve_epochs[i] <= lr_halve_epochs[i - 1]) {
      throw InputError("lr_halve_epochs must be strictly increasing");
    }
  }
}

double learning_rate_at(const TrainConfig& cfg, std::size_t epoch) {
  const auto halvings = std::count_if(cfg.lr_halve_epochs.begin(), cfg.lr_halve_epochs.end(),
                                      [epoch](std::size_t h) { return h <= epoch; });
  return std::ldexp(cfg.lr0, -static_cast<int>(halvings));
}

EpochScheduler::EpochScheduler(std::vector<std::size_t> batches_per_task, std::size_t batch_set_size)
    : remaining_(std::move(batches_per_task)), batch_set_size_(batch_set_size) {
  if (batch_set_size == 0) throw InputError("EpochScheduler: batch-set size must be positive");
}

bool EpochScheduler::epoch_done() const noexcept {
  return std::all_of(remaining_.begin(), remaining_.end(), [](std::size_t r) { return r == 0; });
}

std::optional<EpochScheduler::Grant> EpochScheduler::schedule_round(Rng& rng) {
  std::vector<std::size_t> bucket;
  for (std::size_t t = 0; t < remaining_.size(); ++t)
    if (remaining_[t] > 0) bucket.push_back(t);
  if (bucket.empty()) return std::nullopt;
  std::uniform_int_distribution<std::size_t> pick(0, bucket.size() - 1);
  const std::size_t task = bucket[pick(rng)];
  const std::size_t granted = std::min(batch_set_size_, remaining_[task]);
  remaining_[task] -= granted;
  return Grant{task, granted};
}

void AdamBank::update(const Key& key, Matrix& params, const Matrix& grads, double lr) {
  auto it = states_.find(key);
  if (it == states_.end()) {
    it = states_.emplace(key, AdamState::for_shape(params.rows(), params.cols(), lr)).first;
  }
  it->second.lr = lr;
  adam_update(params, grads, it->second);
}

void AdamBank::apply(ModuleGrid& grid, const TaskGradients& grads, double lr) {
  for (const auto& bg : grads.blocks) {
    if (grid.is_frozen(bg.layer, bg.module)) continue;
    ModuleBlock& blk = grid.mutable_block(bg.layer, bg.module);
    update({0, bg.layer, bg.module, 0, 0}, blk.W, bg.dW, lr);
    update({0, bg.layer, bg.module, 0, 1}, blk.b, bg.db, lr);
  }
  for (const auto& ng : grads.norms) {
    if (grid.is_norm_frozen(ng.layer, ng.module, ng.instance)) continue;
    NormInstance& norm = grid.mutable_block(ng.layer, ng.module).norms[ng.instance];
    update({1, ng.layer, ng.module, ng.instance, 0}, norm.gamma, ng.dgamma, lr);
    update({1, ng.layer, ng.module, ng.instance, 1}, norm.beta, ng.dbeta, lr);
  }
  if (!grid.is_task_frozen(grads.task)) {
    const Slice s = grads.slice;
    Matrix W = columns(grid.head_W(), s.start, s.end);
    Matrix b = columns(grid.head_b(), s.start, s.end);
    update({2, grads.task, 0, 0, 0}, W, grads.head_W, lr);
    update({2, grads.task, 0, 0, 1}, b, grads.head_b, lr);
    set_columns(grid.mutable_head_W(), s.start, W);
    set_columns(grid.mutable_head_b(), s.start, b);
  }
}

std::vector<double> RunReport::best_acc() const {
  std::vector<double> best(tasks.size(), 0.0);
  for (const auto& e : epochs)
    for (std::size_t t = 0; t < e.per_task.size() && t < best.size(); ++t)
      best[t] = std::max(best[t], e.per_task[t].val_acc);
  return best;
}

double RunReport::mean_final_acc() const {
  if (final_acc.empty()) return 0.0;
  return std::accumulate(final_acc.begin(), final_acc.end(), 0.0) / static_cast<double>(final_acc.size());
}

std::size_t argmax_lowest(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

double accuracy(const ModuleGrid& grid, const TaskSpec& task, const Dataset& ds) {
  if (ds.size() == 0) throw InputError("validate: empty validation set for task " + std::to_string(task.id));
  const ForwardResult fr = forward_task(grid, task, ds.features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (argmax_lowest(fr.logits.row(i)) == ds.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

double validate(const ModuleGrid& grid, const TaskSpec& task) {
  if (!task.val_ds) throw InputError("validate: task " + std::to_string(task.id) + " has no validation set");
  return accuracy(grid, task, *task.val_ds);
}

namespace {

void check_tasks(const ModuleGrid& grid, const std::vector<TaskSpec>& tasks) {
  if (tasks.empty()) throw ContractError("training needs at least one task");
  for (const auto& t : tasks) {
    grid.require_registered(t);
    if (!t.train_ds || !t.val_ds) throw ContractError("task " + std::to_string(t.id) + " lacks datasets");
    if (t.train_ds->classes != t.classes || t.val_ds->classes != t.classes) {
      throw ContractError("task " + std::to_string(t.id) + " class count differs from its datasets");
    }
  }
}

RunReport empty_report(const std::vector<TaskSpec>& tasks, const TrainConfig& cfg, std::string mode) {
  RunReport r;
  r.seed = cfg.seed;
  r.mode = std::move(mode);
  for (const auto& t : tasks) r.tasks.push_back(TaskSummary{t.id, t.classes, t.slice});
  return r;
}

/// Runs `cfg.epochs` epochs over the tasks listed in `active`, appending one
/// EpochRecord per epoch (numbered from `epoch_offset + 1`).
void run_epochs(ModuleGrid& grid, const std::vector<TaskSpec>& tasks, const std::vector<std::size_t>& active,
                const TrainConfig& cfg, Rng& rng, AdamBank& adam, RunReport& report, std::size_t epoch_offset) {
  std::vector<BatchPlan> plans;
  plans.reserve(active.size());
  for (std::size_t a : active) plans.emplace_back(tasks[a].train_ds->size(), cfg.batch_size, rng);

  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const double lr = learning_rate_at(cfg, e);
    std::vector<std::size_t> batches;
    for (auto& p : plans) {
      p.reshuffle(rng);
      batches.push_back(p.batches_per_epoch());
    }
    EpochScheduler sched(batches, cfg.batch_set_size);
    std::vector<double> loss_sum(active.size(), 0.0);
    std::vector<std::size_t> loss_count(active.size(), 0);

    while (auto grant = sched.schedule_round(rng)) {
      const TaskSpec& task = tasks[active[grant->task]];
      for (Batch& batch : next_batches(*task.train_ds, plans[grant->task], grant->batches)) {
        ForwardResult fr = forward_task(grid, task, batch.x, Mode::train);
        XentResult xe = softmax_xent_slice(fr.logits, batch.y, Slice{0, task.classes});
        if (!std::isfinite(xe.loss)) throw NumericError("non-finite training loss on task " + std::to_string(task.id));
        TaskGradients g = backward_task(grid, task, fr.tape, xe.dlogits);
        adam.apply(grid, g, lr);
        loss_sum[grant->task] += xe.loss;
        ++loss_count[grant->task];
      }
    }

    EpochRecord rec{epoch_offset + e, lr, std::vector<TaskEpochStats>(tasks.size())};
    for (std::size_t i = 0; i < active.size(); ++i) {
      if (loss_count[i]) rec.per_task[active[i]].loss = loss_sum[i] / static_cast<double>(loss_count[i]);
    }
    for (std::size_t t = 0; t < tasks.size(); ++t) rec.per_task[t].val_acc = validate(grid, tasks[t]);
    report.epochs.push_back(std::move(rec));
  }
}

void finish(const ModuleGrid& grid, const std::vector<TaskSpec>& tasks, RunReport& report,
            std::chrono::steady_clock::time_point start) {
  for (const auto& t : tasks) report.final_acc.push_back(validate(grid, t));
  report.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

RunReport train_parallel(ModuleGrid& grid, const std::vector<TaskSpec>& tasks, const TrainConfig& cfg) {
  cfg.validate();
  check_tasks(grid, tasks);
  for (const auto& t : tasks) {
    if (t.train_ds->size() != tasks.front().train_ds->size()) {
      throw ContractError("train_parallel: training sets must be oversampled to equal size first");
    }
  }
  const auto start = std::chrono::steady_clock::now();
  RunReport report = empty_report(tasks, cfg, "parallel");
  std::vector<std::size_t> active(tasks.size());
  std::iota(active.begin(), active.end(), std::size_t{0});
  Rng rng = make_rng(cfg.seed, "train");
  AdamBank adam;
  run_epochs(grid, tasks, active, cfg, rng, adam, report, 0);
  finish(grid, tasks, report, start);
  return report;
}

RunReport train_sequential(ModuleGrid& grid, const std::vector<TaskSpec>& tasks, const TrainConfig& cfg,
                           const FreezeCallback& on_frozen) {
  cfg.validate();
  check_tasks(grid, tasks);
  const auto start = std::chrono::steady_clock::now();
  RunReport report = empty_report(tasks, cfg, "sequential");
  AdamBank adam;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    Rng rng = make_rng(cfg.seed, "train", i);
    run_epochs(grid, tasks, {i}, cfg, rng, adam, report, i * cfg.epochs);
    grid.freeze_path(tasks[i].path);
    grid.freeze_task(tasks[i].id);
    if (on_frozen) on_frozen(grid, tasks[i].id);
  }
  finish(grid, tasks, report, start);
  return report;
}

RunReport train_single(ModuleGrid& grid, const std::vector<TaskSpec>& tasks, std::size_t task_index,
                       const TrainConfig& cfg) {
  cfg.validate();
  check_tasks(grid, tasks);
  if (task_index >= tasks.size()) throw InputError("train_single: task index out of range");
  const auto start = std::chrono::steady_clock::now();
  RunReport report = empty_report(tasks, cfg, "single");
  Rng rng = make_rng(cfg.seed, "train", task_index);
  AdamBank adam;
  run_epochs(grid, tasks, {task_index}, cfg, rng, adam, report, 0);
  finish(grid, tasks, report, start);
  return report;
}

}  // namespace part
