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

#include "part/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string_view>

#include "part/errors.hpp"

namespace part {

void Dataset::validate() const {
  if (features.rows() != labels.size()) throw InputError("dataset '" + name + "': row/label count mismatch");
  if (classes < 2) throw InputError("dataset '" + name + "': needs at least two classes");
  if (size() < classes) throw InputError("dataset '" + name + "': fewer samples than classes");
  std::vector<std::size_t> counts(classes, 0);
  for (Label y : labels) {
    if (y >= classes) throw InputError("dataset '" + name + "': label out of range");
    ++counts[y];
  }
  if (std::find(counts.begin(), counts.end(), 0) != counts.end()) {
    throw InputError("dataset '" + name + "': some class has no samples");
  }
  if (!features.all_finite()) throw InputError("dataset '" + name + "': non-finite feature");
}

namespace {

std::vector<std::vector<double>> class_means(Rng& rng, std::size_t classes, std::size_t dims,
                                             double margin) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> means;
  if (classes <= dims) {
    // Orthonormal directions scaled so every pair sits exactly `margin` apart.
    const double radius = margin / std::sqrt(2.0);
    while (means.size() < classes) {
      std::vector<double> v(dims);
      for (double& x : v) x = normal(rng);
      for (const auto& u : means) {
        double dot = 0.0;
        for (std::size_t j = 0; j < dims; ++j) dot += v[j] * u[j] / radius;
        for (std::size_t j = 0; j < dims; ++j) v[j] -= dot * u[j] / radius;
      }
      const double len = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
      if (len < 1e-6) continue;
      for (double& x : v) x *= radius / len;
      means.push_back(std::move(v));
    }
    return means;
  }
  // More classes than dimensions: rejection-sample with a growing spread.
  double spread = margin * std::sqrt(static_cast<double>(classes));
  for (int attempt = 0; attempt < 10000; ++attempt) {
    means.assign(classes, std::vector<double>(dims));
    for (auto& mu : means)
      for (double& x : mu) x = spread * normal(rng);
    bool ok = true;
    for (std::size_t a = 0; a < classes && ok; ++a)
      for (std::size_t b = a + 1; b < classes && ok; ++b) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < dims; ++j) d2 += (means[a][j] - means[b][j]) * (means[a][j] - means[b][j]);
        ok = std::sqrt(d2) >= margin;
      }
    if (ok) return means;
    if (attempt % 100 == 99) spread *= 1.1;
  }
  throw InputError("gen_synthetic_task: could not place class means");
}

}  // namespace

DatasetSplit gen_synthetic_task(Rng& rng, std::size_t classes, std::size_t n_per_class,
                                std::size_t dims, double margin, std::string name) {
  if (classes < 2) throw InputError("gen_synthetic_task: classes must be >= 2");
  if (dims < 2) throw InputError("gen_synthetic_task: dims must be >= 2");
  if (!(margin > 0.0) || !std::isfinite(margin)) throw InputError("gen_synthetic_task: margin must be > 0");
  if (n_per_class < 2) throw InputError("gen_synthetic_task: need at least 2 samples per class");

  const auto means = class_means(rng, classes, dims, margin);
  const std::size_t n_train = std::max<std::size_t>(1, n_per_class * 4 / 5);
  const std::size_t n_val = n_per_class - n_train;

  DatasetSplit out;
  out.train = Dataset{Matrix(classes * n_train, dims), {}, classes, name + "/train", std::nullopt};
  out.val = Dataset{Matrix(classes * n_val, dims), {}, classes, name + "/val", std::nullopt};
  std::normal_distribution<double> normal(0.0, 1.0);
  std::size_t tr = 0;
  std::size_t va = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const bool to_train = i < n_train;
      Dataset& dst = to_train ? out.train : out.val;
      const std::size_t r = to_train ? tr++ : va++;
      for (std::size_t j = 0; j < dims; ++j) dst.features(r, j) = means[c][j] + normal(rng);
      dst.labels.push_back(c);
    }
  }
  return out;
}

void apply_standardization(Dataset& ds, const Standardization& s) {
  if (s.mean.cols() != ds.dims() || s.scale.cols() != ds.dims()) {
    throw InputError("standardization width differs from dataset '" + ds.name + "'");
  }
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < ds.dims(); ++j)
      ds.features(i, j) = (ds.features(i, j) - s.mean[j]) / s.scale[j];
  ds.standardization = s;
}

void standardize(Dataset& train, Dataset& val) {
  if (train.size() == 0) throw InputError("standardize: empty training set");
  const std::size_t d = train.dims();
  Standardization s{Matrix(1, d), Matrix(1, d, 1.0)};
  const double n = static_cast<double>(train.size());
  for (std::size_t j = 0; j < d; ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) sum += train.features(i, j);
    const double mean = sum / n;
    double ss = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      const double dx = train.features(i, j) - mean;
      ss += dx * dx;
    }
    const double sd = std::sqrt(ss / n);
    s.mean[j] = mean;
    s.scale[j] = sd > 1e-12 ? sd : 1.0;
  }
  apply_standardization(train, s);
  apply_standardization(val, s);
}

std::vector<Dataset> oversample_to_equal(std::span<const Dataset> datasets, Rng& rng) {
  std::size_t target = 0;
  for (const auto& ds : datasets) {
    if (ds.size() == 0) throw InputError("oversample_to_equal: dataset '" + ds.name + "' is empty");
    target = std::max(target, ds.size());
  }
  std::vector<Dataset> out;
  out.reserve(datasets.size());
  for (const auto& ds : datasets) {
    if (ds.size() == target) {
      out.push_back(ds);
      continue;
    }
    const std::size_t n = ds.size();
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    Dataset grown = ds;
    grown.features = Matrix(target, ds.dims());
    std::copy(ds.features.values().begin(), ds.features.values().end(), grown.features.values().begin());
    grown.labels.resize(target);
    for (std::size_t r = n; r < target; ++r) {
      const std::size_t src = pick(rng);
      std::copy_n(ds.features.row(src).begin(), ds.dims(), grown.features.row(r).begin());
      grown.labels[r] = ds.labels[src];
    }
    out.push_back(std::move(grown));
  }
  return out;
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t pos = 0;
  while (true) {
    const std::size_t comma = line.find(',', pos);
    cells.push_back(line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  for (auto& c : cells) {
    while (!c.empty() && (c.front() == ' ' || c.front() == '\t')) c.remove_prefix(1);
    while (!c.empty() && (c.back() == ' ' || c.back() == '\t' || c.back() == '\r')) c.remove_suffix(1);
  }
  return cells;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());

  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError("missing header", line_no);
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = split_commas(line);
  const auto label_it = std::find(header.begin(), header.end(), std::string_view("label"));
  if (label_it == header.end()) throw ParseError("missing header column 'label'", line_no);
  const std::size_t label_col = static_cast<std::size_t>(label_it - header.begin());
  const std::size_t dims = header.size() - 1;
  if (dims == 0) throw ParseError("header has no feature columns", line_no);

  std::vector<double> values;
  std::vector<Label> labels;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_commas(line);
    if (cells.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " cells, got " +
                       std::to_string(cells.size()), line_no);
    }
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const auto cell = cells[j];
      if (j == label_col) {
        long long y = -1;
        auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), y);
        if (ec != std::errc() || ptr != cell.data() + cell.size() || y < 0) {
          throw ParseError("label '" + std::string(cell) + "' is not a non-negative integer", line_no);
        }
        labels.push_back(static_cast<Label>(y));
      } else {
        double x = 0.0;
        auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), x);
        if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(x)) {
          throw ParseError("non-numeric cell '" + std::string(cell) + "'", line_no);
        }
        values.push_back(x);
      }
    }
  }
  if (labels.empty()) throw ParseError("no samples", line_no);

  const Label max_label = *std::max_element(labels.begin(), labels.end());
  std::vector<bool> seen(max_label + 1, false);
  for (Label y : labels) seen[y] = true;
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw ParseError("non-contiguous labels");
  }
  Dataset ds{Matrix(labels.size(), dims, std::move(values)), std::move(labels), max_label + 1,
             path.stem().string(), std::nullopt};
  if (ds.classes < 2) throw ParseError("need at least two classes");
  return ds;
}

void save_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "label";
  for (std::size_t j = 0; j < ds.dims(); ++j) out << ",f" << j;
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.labels[i];
    for (std::size_t j = 0; j < ds.dims(); ++j) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, ds.features(i, j));
      out << ',' << std::string_view(buf, static_cast<std::size_t>(ptr - buf));
    }
    out << '\n';
  }
}

Dataset balanced_sample(const Dataset& ds, std::size_t n, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  const std::size_t base = n / ds.classes;
  const std::size_t extra = n % ds.classes;
  std::vector<std::size_t> picked;
  for (std::size_t c = 0; c < ds.classes; ++c) {
    const std::size_t want = base + (c < extra ? 1 : 0);
    if (by_class[c].size() < want) {
      throw InputError("balanced_sample: class " + std::to_string(c) + " of '" + ds.name + "' has " +
                       std::to_string(by_class[c].size()) + " samples, " + std::to_string(want) +
                       " requested");
    }
    std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
    picked.insert(picked.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(want));
  }
  // Class-major row order, so row i of two samples holds the same class.
  std::sort(picked.begin(), picked.end(), [&](std::size_t a, std::size_t b) {
    return ds.labels[a] != ds.labels[b] ? ds.labels[a] < ds.labels[b] : a < b;
  });
  Dataset out{select_rows(ds.features, picked), {}, ds.classes, ds.name + "/balanced", ds.standardization};
  for (std::size_t i : picked) out.labels.push_back(ds.labels[i]);
  return out;
}

BatchPlan::BatchPlan(std::size_t n, std::size_t batch_size, Rng& rng) : batch_size_(batch_size), order_(n) {
  if (batch_size == 0) throw InputError("BatchPlan: batch size must be positive");
  reshuffle(rng);
}

void BatchPlan::reshuffle(Rng& rng) {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng);
  cursor_ = 0;
}

std::vector<Batch> next_batches(const Dataset& ds, BatchPlan& plan, std::size_t count) {
  if (plan.order_.size() != ds.size()) throw ContractError("next_batches: plan belongs to another dataset");
  std::vector<Batch> out;
  while (out.size() < count && !plan.exhausted()) {
    const std::size_t end = std::min(plan.cursor_ + plan.batch_size_, plan.order_.size());
    Batch b;
    b.indices.assign(plan.order_.begin() + static_cast<std::ptrdiff_t>(plan.cursor_),
                     plan.order_.begin() + static_cast<std::ptrdiff_t>(end));
    b.x = select_rows(ds.features, b.indices);
    b.y.reserve(b.indices.size());
    for (std::size_t i : b.indices) b.y.push_back(ds.labels[i]);
    plan.cursor_ = end;
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace part
