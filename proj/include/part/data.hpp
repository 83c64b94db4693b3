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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "part/numerics.hpp"
#include "part/random.hpp"

namespace part {

/// Per-feature affine map fitted on a training split.
struct Standardization {
  Matrix mean;  // 1×d
  Matrix scale; // 1×d, strictly positive
  bool operator==(const Standardization&) const = default;
};

struct Dataset {
  Matrix features;            // n×d
  std::vector<Label> labels;  // in [0, classes)
  std::size_t classes = 0;
  std::string name;
  std::optional<Standardization> standardization;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dims() const noexcept { return features.cols(); }

  /// Throws InputError unless n >= classes, every class occurs and features are finite.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

struct DatasetSplit {
  Dataset train;
  Dataset val;
};

/// Isotropic unit-variance Gaussian clusters, one per class, whose means are
/// pairwise at least `margin` apart. Split 80/20 per class.
DatasetSplit gen_synthetic_task(Rng& rng, std::size_t classes, std::size_t n_per_class,
                                std::size_t dims, double margin, std::string name = {});

/// Fits a Standardization on `train` and applies it to both splits.
void standardize(Dataset& train, Dataset& val);
void apply_standardization(Dataset& ds, const Standardization& s);

/// Pads every dataset to the largest size by drawing uniformly with
/// replacement from its own samples; originals stay a prefix.
std::vector<Dataset> oversample_to_equal(std::span<const Dataset> datasets, Rng& rng);

Dataset load_csv(const std::filesystem::path& path);
void save_csv(const Dataset& ds, const std::filesystem::path& path);

/// `n` samples with per-class counts differing by at most one.
Dataset balanced_sample(const Dataset& ds, std::size_t n, Rng& rng);

struct Batch {
  Matrix x;
  std::vector<Label> y;
  std::vector<std::size_t> indices;
};

/// Epoch permutation over a dataset plus a read cursor.
class BatchPlan {
 public:
  BatchPlan(std::size_t n, std::size_t batch_size, Rng& rng);

  /// Fresh permutation, cursor back to zero.
  void reshuffle(Rng& rng);

  std::size_t batch_size() const noexcept { return batch_size_; }
  std::size_t cursor() const noexcept { return cursor_; }
  std::size_t samples() const noexcept { return order_.size(); }
  const std::vector<std::size_t>& order() const noexcept { return order_; }
  bool exhausted() const noexcept { return cursor_ >= order_.size(); }
  std::size_t batches_per_epoch() const noexcept {
    return (order_.size() + batch_size_ - 1) / batch_size_;
  }
  std::size_t remaining_batches() const noexcept {
    return (order_.size() - cursor_ + batch_size_ - 1) / batch_size_;
  }

 private:
  friend std::vector<Batch> next_batches(const Dataset&, BatchPlan&, std::size_t);

  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Up to `count` consecutive batches of the epoch permutation. The last one
/// may be short; fewer than `count` come back only when the epoch runs out.
std::vector<Batch> next_batches(const Dataset& ds, BatchPlan& plan, std::size_t count);

}  // namespace part
