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

#include "part/modular_net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "part/errors.hpp"

namespace part {

namespace {

constexpr double kNormEps = 1e-5;

void fill_uniform(Matrix& m, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& x : m.values()) x = u(rng);
}

}  // namespace

std::string to_string(NormMode mode) { return mode == NormMode::shared ? "shared" : "per_task"; }

NormMode norm_mode_from_string(const std::string& s) {
  if (s == "shared") return NormMode::shared;
  if (s == "per_task" || s == "per-task") return NormMode::per_task;
  throw InputError("unknown norm mode '" + s + "' (expected shared|per_task)");
}

NormInstance NormInstance::identity(std::size_t width) {
  return NormInstance{Matrix(1, width, 1.0), Matrix(1, width), Matrix(1, width), Matrix(1, width, 1.0), 0.1};
}

bool Path::uses(std::size_t layer, std::size_t module) const {
  if (layer >= selection.size()) return false;
  const auto& row = selection[layer];
  return std::binary_search(row.begin(), row.end(), module);
}

ModuleGrid::ModuleGrid(GridShape shape, NormMode norm_mode, std::uint64_t seed)
    : shape_(shape), norm_mode_(norm_mode), seed_(seed), head_W_(shape.d_hid, 0), head_b_(1, 0) {
  if (shape.layers == 0 || shape.modules == 0 || shape.d_in == 0 || shape.d_hid == 0) {
    throw InputError("ModuleGrid: every dimension must be positive");
  }
  layers_.resize(shape.layers);
  for (std::size_t l = 0; l < shape.layers; ++l) {
    const std::size_t fan_in = l == 0 ? shape.d_in : shape.d_hid;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t m = 0; m < shape.modules; ++m) {
      Rng rng = make_rng(seed, "block", l * shape.modules + m);
      ModuleBlock blk{Matrix(fan_in, shape.d_hid), Matrix(1, shape.d_hid), {}};
      fill_uniform(blk.W, bound, rng);
      fill_uniform(blk.b, bound, rng);
      if (norm_mode == NormMode::shared) blk.norms.push_back(NormInstance::identity(shape.d_hid));
      layers_[l].push_back(std::move(blk));
    }
  }
}

const ModuleBlock& ModuleGrid::block(std::size_t layer, std::size_t module) const {
  if (layer >= shape_.layers || module >= shape_.modules) throw InputError("block index out of range");
  return layers_[layer][module];
}

ModuleBlock& ModuleGrid::mutable_block(std::size_t layer, std::size_t module) {
  if (layer >= shape_.layers || module >= shape_.modules) throw InputError("block index out of range");
  ++revision_;
  return layers_[layer][module];
}

TaskSpec ModuleGrid::register_task(std::size_t classes) {
  if (classes < 2) throw InputError("register_task: a task needs at least two classes");
  const std::size_t id = tasks_.size();
  const std::size_t start = total_classes();
  const std::size_t width = start + classes;

  Matrix W(shape_.d_hid, width);
  Matrix b(1, width);
  set_columns(W, 0, head_W_);
  set_columns(b, 0, head_b_);
  Rng rng = make_rng(seed_, "head", id);
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape_.d_hid));
  Matrix fresh_W(shape_.d_hid, classes);
  Matrix fresh_b(1, classes);
  fill_uniform(fresh_W, bound, rng);
  fill_uniform(fresh_b, bound, rng);
  set_columns(W, start, fresh_W);
  set_columns(b, start, fresh_b);
  head_W_ = std::move(W);
  head_b_ = std::move(b);

  if (norm_mode_ == NormMode::per_task) {
    for (auto& layer : layers_)
      for (auto& blk : layer) blk.norms.push_back(NormInstance::identity(shape_.d_hid));
  }
  tasks_.push_back(TaskEntry{classes, Slice{start, width}, Path{}});
  ++revision_;
  return task_spec(id);
}

void ModuleGrid::assign_path(std::size_t task, const Path& path) {
  if (task >= tasks_.size()) throw InputError("assign_path: unregistered task " + std::to_string(task));
  if (path.layers() != shape_.layers) throw InputError("assign_path: path depth differs from grid");
  for (const auto& row : path.selection) {
    if (row.empty()) throw InputError("assign_path: empty layer selection");
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (row[i] >= shape_.modules) throw InputError("assign_path: module index out of range");
      if (i > 0 && row[i] <= row[i - 1]) throw InputError("assign_path: indices must be strictly increasing");
    }
  }
  tasks_[task].path = path;
}

TaskSpec ModuleGrid::task_spec(std::size_t task) const {
  if (task >= tasks_.size()) throw InputError("unregistered task " + std::to_string(task));
  const auto& e = tasks_[task];
  return TaskSpec{task, e.classes, e.slice, e.path, nullptr, nullptr};
}

void ModuleGrid::require_registered(const TaskSpec& task) const {
  if (task.id >= tasks_.size()) throw InputError("unregistered task " + std::to_string(task.id));
  const auto& e = tasks_[task.id];
  if (e.slice != task.slice || e.classes != task.classes) {
    throw InputError("task " + std::to_string(task.id) + " does not match the grid registry");
  }
  if (task.path.layers() != shape_.layers) {
    throw InputError("task " + std::to_string(task.id) + " has no path over this grid");
  }
  if (!(e.path == task.path)) {
    throw InputError("task " + std::to_string(task.id) + " path differs from the registered path");
  }
}

void ModuleGrid::freeze_path(const Path& path) {
  for (std::size_t l = 0; l < path.layers(); ++l)
    for (std::size_t m : path.selection[l]) {
      if (l >= shape_.layers || m >= shape_.modules) throw InputError("freeze_path: index out of range");
      frozen_.blocks.emplace(l, m);
    }
}

void ModuleGrid::freeze_task(std::size_t task) {
  if (task >= tasks_.size()) throw InputError("freeze_task: unregistered task");
  frozen_.tasks.insert(task);
}

bool ModuleGrid::is_frozen(std::size_t layer, std::size_t module) const {
  return frozen_.blocks.contains({layer, module});
}

bool ModuleGrid::is_task_frozen(std::size_t task) const { return frozen_.tasks.contains(task); }

bool ModuleGrid::is_norm_frozen(std::size_t layer, std::size_t module, std::size_t instance) const {
  return norm_mode_ == NormMode::shared ? is_frozen(layer, module) : is_task_frozen(instance);
}

ModuleGrid ModuleGrid::restore(GridShape shape, NormMode norm_mode, std::uint64_t seed,
                               std::vector<TaskEntry> tasks, FrozenSet frozen) {
  ModuleGrid grid(shape, norm_mode, seed);
  for (const auto& e : tasks) {
    const TaskSpec spec = grid.register_task(e.classes);
    if (spec.slice != e.slice) throw ParseError("checkpoint task slices are not contiguous");
    if (!e.path.selection.empty()) grid.assign_path(spec.id, e.path);
  }
  for (auto [l, m] : frozen.blocks)
    if (l >= shape.layers || m >= shape.modules) throw ParseError("checkpoint frozen block out of range");
  for (auto t : frozen.tasks)
    if (t >= tasks.size()) throw ParseError("checkpoint frozen task out of range");
  grid.frozen_ = std::move(frozen);
  return grid;
}

struct ForwardPass {
  static ForwardResult run(const ModuleGrid& grid, ModuleGrid* stats_owner, const TaskSpec& task,
                           const Matrix& x, Mode mode) {
    grid.require_registered(task);
    const auto& shape = grid.shape();
    if (x.cols() != shape.d_in) {
      throw InputError("forward_task: input width " + std::to_string(x.cols()) + " != d_in " +
                       std::to_string(shape.d_in));
    }
    if (!x.all_finite()) throw InputError("forward_task: non-finite input");

    const std::size_t n = x.rows();
    const std::size_t d = shape.d_hid;
    const std::size_t inst = grid.norm_index(task.id);
    ForwardResult res;
    Tape& tape = res.tape;
    tape.task = task.id;
    tape.mode = mode;
    tape.revision = grid.revision();
    tape.batch = n;
    tape.h.reserve(shape.layers + 1);
    tape.h.push_back(x);
    tape.modules.resize(shape.layers);

    for (std::size_t l = 0; l < shape.layers; ++l) {
      Matrix next(n, d);
      for (std::size_t m : task.path.selection[l]) {
        const ModuleBlock& blk = grid.layers_[l][m];
        const NormInstance& norm = blk.norms[inst];
        ModuleTrace tr;
        tr.module = m;
        Matrix proj = matmul(tape.h[l], blk.W);
        tr.x_hat = Matrix(n, d);
        tr.inv_std = Matrix(1, d);
        if (mode == Mode::train) {
          // Batch-mean centering removes b exactly, so it is left out here;
          // it still enters the running mean used at eval time.
          Matrix mean = column_sums(proj);
          for (double& v : mean.values()) v /= static_cast<double>(n);
          Matrix var(1, d);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              const double c = proj(i, j) - mean[j];
              tr.x_hat(i, j) = c;
              var[j] += c * c;
            }
          for (std::size_t j = 0; j < d; ++j) {
            var[j] /= static_cast<double>(n);
            tr.inv_std[j] = 1.0 / std::sqrt(var[j] + kNormEps);
          }
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) tr.x_hat(i, j) *= tr.inv_std[j];

          if (stats_owner && !grid.is_norm_frozen(l, m, inst)) {
            NormInstance& live = stats_owner->layers_[l][m].norms[inst];
            const double mom = live.momentum;
            const double unbias = n > 1 ? static_cast<double>(n) / static_cast<double>(n - 1) : 1.0;
            for (std::size_t j = 0; j < d; ++j) {
              live.run_mean[j] = (1.0 - mom) * live.run_mean[j] + mom * (mean[j] + blk.b[j]);
              live.run_var[j] = (1.0 - mom) * live.run_var[j] + mom * var[j] * unbias;
            }
          }
        } else {
          for (std::size_t j = 0; j < d; ++j) tr.inv_std[j] = 1.0 / std::sqrt(norm.run_var[j] + kNormEps);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
              tr.x_hat(i, j) = (proj(i, j) + blk.b[j] - norm.run_mean[j]) * tr.inv_std[j];
        }
        tr.y = Matrix(n, d);
        tr.out = Matrix(n, d);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            const double y = norm.gamma[j] * tr.x_hat(i, j) + norm.beta[j];
            tr.y(i, j) = y;
            tr.out(i, j) = y > 0.0 ? y : 0.0;
            next(i, j) += tr.out(i, j);
          }
        tape.modules[l].push_back(std::move(tr));
      }
      tape.h.push_back(std::move(next));
    }

    const Slice s = task.slice;
    res.logits = matmul(tape.h.back(), columns(grid.head_W_, s.start, s.end));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < s.width(); ++j) res.logits(i, j) += grid.head_b_[s.start + j];
    return res;
  }
};

ForwardResult forward_task(ModuleGrid& grid, const TaskSpec& task, const Matrix& x, Mode mode) {
  return ForwardPass::run(grid, mode == Mode::train ? &grid : nullptr, task, x, mode);
}

ForwardResult forward_task(const ModuleGrid& grid, const TaskSpec& task, const Matrix& x) {
  return ForwardPass::run(grid, nullptr, task, x, Mode::eval);
}

TaskGradients backward_task(const ModuleGrid& grid, const TaskSpec& task, const Tape& tape,
                            const Matrix& dlogits) {
  grid.require_registered(task);
  if (tape.task != task.id) throw ContractError("backward_task: tape belongs to another task");
  if (tape.revision != grid.revision()) throw ContractError("backward_task: stale tape (parameters changed)");
  const auto& shape = grid.shape();
  const std::size_t n = tape.batch;
  const std::size_t d = shape.d_hid;
  if (dlogits.rows() != n || dlogits.cols() != task.classes) {
    throw ContractError("backward_task: dlogits must be batch x classes");
  }
  const std::size_t inst = grid.norm_index(task.id);
  const Slice s = task.slice;

  TaskGradients g;
  g.task = task.id;
  g.slice = s;
  g.head_W = matmul_tn(tape.h.back(), dlogits);
  g.head_b = column_sums(dlogits);
  Matrix dh = matmul_nt(dlogits, columns(grid.head_W(), s.start, s.end));

  for (std::size_t l = shape.layers; l-- > 0;) {
    Matrix dh_prev = l > 0 ? Matrix(n, d) : Matrix();
    for (const ModuleTrace& tr : tape.modules[l]) {
      const ModuleBlock& blk = grid.block(l, tr.module);
      const NormInstance& norm = blk.norms[inst];
      NormGrad ng{l, tr.module, inst, Matrix(1, d), Matrix(1, d)};
      Matrix dxhat(n, d);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          const double dy = tr.y(i, j) > 0.0 ? dh(i, j) : 0.0;
          ng.dgamma[j] += dy * tr.x_hat(i, j);
          ng.dbeta[j] += dy;
          dxhat(i, j) = dy * norm.gamma[j];
        }
      Matrix dz(n, d);
      if (tape.mode == Mode::train) {
        const double nn = static_cast<double>(n);
        for (std::size_t j = 0; j < d; ++j) {
          double sum = 0.0;
          double sum_x = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            sum += dxhat(i, j);
            sum_x += dxhat(i, j) * tr.x_hat(i, j);
          }
          for (std::size_t i = 0; i < n; ++i) {
            dz(i, j) = tr.inv_std[j] / nn * (nn * dxhat(i, j) - sum - tr.x_hat(i, j) * sum_x);
          }
        }
      } else {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) dz(i, j) = dxhat(i, j) * tr.inv_std[j];
      }
      g.blocks.push_back(BlockGrad{l, tr.module, matmul_tn(tape.h[l], dz), column_sums(dz)});
      g.norms.push_back(std::move(ng));
      if (l > 0) add_in_place(dh_prev, matmul_nt(dz, blk.W));
    }
    dh = std::move(dh_prev);
  }
  return g;
}

Path assign_random_path(std::size_t modules, std::size_t picks, std::size_t layers, Rng& rng) {
  if (picks == 0 || picks > modules) throw InputError("assign_random_path: need 1 <= N <= M");
  if (layers == 0) throw InputError("assign_random_path: need at least one layer");
  Path p;
  std::vector<std::size_t> pool(modules);
  for (std::size_t l = 0; l < layers; ++l) {
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    // Partial Fisher-Yates: the first `picks` entries form a uniform subset.
    for (std::size_t i = 0; i < picks; ++i) {
      std::uniform_int_distribution<std::size_t> u(i, modules - 1);
      std::swap(pool[i], pool[u(rng)]);
    }
    std::vector<std::size_t> row(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(picks));
    std::sort(row.begin(), row.end());
    p.selection.push_back(std::move(row));
  }
  return p;
}

std::pair<Path, Path> build_controlled_paths(std::size_t layers, std::size_t modules, std::size_t picks,
                                             const std::set<std::size_t>& shared_layers) {
  if (picks == 0 || modules != 2 * picks) throw InputError("build_controlled_paths: requires M = 2N");
  for (std::size_t l : shared_layers)
    if (l >= layers) throw InputError("build_controlled_paths: shared layer out of range");
  std::vector<std::size_t> low(picks);
  std::vector<std::size_t> high(picks);
  std::iota(low.begin(), low.end(), std::size_t{0});
  std::iota(high.begin(), high.end(), picks);
  Path a;
  Path b;
  for (std::size_t l = 0; l < layers; ++l) {
    a.selection.push_back(low);
    b.selection.push_back(shared_layers.contains(l) ? low : high);
  }
  return {std::move(a), std::move(b)};
}

std::set<std::size_t> parse_sharing_setup(const std::string& label) {
  if (label == "no layer") return {};
  const std::string prefix = "layer ";
  if (label.rfind(prefix, 0) != 0 || label.size() == prefix.size()) {
    throw InputError("unknown sharing setup '" + label + "'");
  }
  std::set<std::size_t> out;
  for (std::size_t i = prefix.size(); i < label.size(); ++i) {
    const char c = label[i];
    if (c < '1' || c > '9') throw InputError("unknown sharing setup '" + label + "'");
    out.insert(static_cast<std::size_t>(c - '1'));
  }
  return out;
}

std::string sharing_setup_label(const std::set<std::size_t>& shared_layers) {
  if (shared_layers.empty()) return "no layer";
  std::string s = "layer ";
  for (std::size_t l : shared_layers) s += std::to_string(l + 1);
  return s;
}

namespace {

template <class Grid, class Fn>
void walk_tensors(Grid& grid, bool with_stats, Fn&& fn) {
  const auto& shape = grid.shape();
  for (std::size_t l = 0; l < shape.layers; ++l)
    for (std::size_t m = 0; m < shape.modules; ++m) {
      auto& blk = grid.block(l, m);
      fn(blk.W);
      fn(blk.b);
      for (auto& norm : blk.norms) {
        fn(norm.gamma);
        fn(norm.beta);
        if (with_stats) {
          fn(norm.run_mean);
          fn(norm.run_var);
        }
      }
    }
  fn(grid.head_W());
  fn(grid.head_b());
}

// Non-const view used by the setters; one revision bump covers the whole write.
struct MutableGridView {
  ModuleGrid& grid;
  const GridShape& shape() const { return grid.shape(); }
  ModuleBlock& block(std::size_t l, std::size_t m) { return grid.mutable_block(l, m); }
  Matrix& head_W() { return grid.mutable_head_W(); }
  Matrix& head_b() { return grid.mutable_head_b(); }
};

std::vector<double> collect(const ModuleGrid& grid, bool with_stats) {
  std::vector<double> out;
  walk_tensors(grid, with_stats, [&](const Matrix& t) {
    out.insert(out.end(), t.values().begin(), t.values().end());
  });
  return out;
}

void scatter(ModuleGrid& grid, bool with_stats, std::span<const double> values) {
  std::size_t expected = 0;
  walk_tensors(grid, with_stats, [&](const Matrix& t) { expected += t.size(); });
  if (values.size() != expected) {
    throw ContractError("parameter vector length " + std::to_string(values.size()) + " != " +
                        std::to_string(expected));
  }
  std::size_t pos = 0;
  MutableGridView view{grid};
  walk_tensors(view, with_stats, [&](Matrix& t) {
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), t.size(), t.values().begin());
    pos += t.size();
  });
}

}  // namespace

std::vector<double> parameter_blob(const ModuleGrid& grid) { return collect(grid, true); }
void set_parameter_blob(ModuleGrid& grid, std::span<const double> blob) { scatter(grid, true, blob); }

std::size_t parameter_blob_size(const ModuleGrid& grid) {
  std::size_t n = 0;
  walk_tensors(grid, true, [&](const Matrix& t) { n += t.size(); });
  return n;
}

std::vector<double> trainable_parameters(const ModuleGrid& grid) { return collect(grid, false); }
void set_trainable_parameters(ModuleGrid& grid, std::span<const double> values) {
  scatter(grid, false, values);
}

std::vector<double> flatten_gradients(const ModuleGrid& grid, const TaskGradients& grads) {
  const auto& shape = grid.shape();
  // Offsets of each block's W in trainable order.
  std::vector<std::size_t> block_offset(shape.layers * shape.modules);
  std::size_t pos = 0;
  for (std::size_t l = 0; l < shape.layers; ++l)
    for (std::size_t m = 0; m < shape.modules; ++m) {
      block_offset[l * shape.modules + m] = pos;
      const auto& blk = grid.block(l, m);
      pos += blk.W.size() + blk.b.size() + blk.norms.size() * 2 * shape.d_hid;
    }
  const std::size_t head_offset = pos;
  std::vector<double> out(head_offset + grid.head_W().size() + grid.head_b().size(), 0.0);

  for (const auto& bg : grads.blocks) {
    const std::size_t off = block_offset[bg.layer * shape.modules + bg.module];
    std::copy(bg.dW.values().begin(), bg.dW.values().end(), out.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(bg.db.values().begin(), bg.db.values().end(),
              out.begin() + static_cast<std::ptrdiff_t>(off + bg.dW.size()));
  }
  for (const auto& ng : grads.norms) {
    const auto& blk = grid.block(ng.layer, ng.module);
    const std::size_t off = block_offset[ng.layer * shape.modules + ng.module] + blk.W.size() +
                            blk.b.size() + ng.instance * 2 * shape.d_hid;
    std::copy(ng.dgamma.values().begin(), ng.dgamma.values().end(), out.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(ng.dbeta.values().begin(), ng.dbeta.values().end(),
              out.begin() + static_cast<std::ptrdiff_t>(off + shape.d_hid));
  }
  const std::size_t total = grid.total_classes();
  for (std::size_t r = 0; r < grads.head_W.rows(); ++r)
    for (std::size_t j = 0; j < grads.head_W.cols(); ++j)
      out[head_offset + r * total + grads.slice.start + j] = grads.head_W(r, j);
  const std::size_t bias_offset = head_offset + grid.head_W().size();
  for (std::size_t j = 0; j < grads.head_b.cols(); ++j) out[bias_offset + grads.slice.start + j] = grads.head_b[j];
  return out;
}

std::uint64_t block_fingerprint(const ModuleGrid& grid, std::size_t layer, std::size_t module) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const Matrix& t) {
    for (double v : t.values()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
      }
    }
  };
  const auto& blk = grid.block(layer, module);
  mix(blk.W);
  mix(blk.b);
  if (grid.norm_mode() == NormMode::shared) {
    const auto& n = blk.norms.front();
    mix(n.gamma);
    mix(n.beta);
    mix(n.run_mean);
    mix(n.run_var);
  }
  return h;
}

}  // namespace part
