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

#include "part/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "part/errors.hpp"

namespace part {

SharingProfile sharing_profile(std::span<const Path> paths, std::size_t modules, std::size_t layers) {
  SharingProfile p;
  p.tasks = paths.size();
  p.usage.assign(layers, std::vector<std::size_t>(modules, 0));
  for (const Path& path : paths) {
    if (path.layers() != layers) throw InputError("sharing_profile: path depth differs from grid depth");
    for (std::size_t l = 0; l < layers; ++l)
      for (std::size_t m : path.selection[l]) {
        if (m >= modules) throw InputError("sharing_profile: module index out of range");
        ++p.usage[l][m];
      }
  }
  p.histogram.assign(p.tasks + 1, 0);
  p.per_layer.assign(layers, std::vector<std::size_t>(p.tasks + 1, 0));
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t m = 0; m < modules; ++m) {
      ++p.histogram[p.usage[l][m]];
      ++p.per_layer[l][p.usage[l][m]];
    }
  return p;
}

double expected_sharing_count(std::size_t layers, std::size_t modules, std::size_t picks, std::size_t k,
                              std::size_t t) {
  if (t > k) return 0.0;
  const double p = static_cast<double>(picks) / static_cast<double>(modules);
  double binom = 1.0;
  for (std::size_t i = 1; i <= t; ++i) binom = binom * static_cast<double>(k - t + i) / static_cast<double>(i);
  return static_cast<double>(layers * modules) * binom * std::pow(p, static_cast<double>(t)) *
         std::pow(1.0 - p, static_cast<double>(k - t));
}

double hsic(const Matrix& K, const Matrix& L) {
  const std::size_t n = K.rows();
  if (K.cols() != n || !L.same_shape(K)) throw InputError("hsic: kernels must be square and of equal size");
  if (n < 3) throw InputError("hsic: need at least 3 samples");
  // tr(K H L H) = sum_ij (H K H)_ij L_ji
  std::vector<double> row_mean(n, 0.0);
  std::vector<double> col_mean(n, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      row_mean[i] += K(i, j);
      col_mean[j] += K(i, j);
    }
  for (std::size_t i = 0; i < n; ++i) {
    grand += row_mean[i];
    row_mean[i] /= static_cast<double>(n);
    col_mean[i] /= static_cast<double>(n);
  }
  grand /= static_cast<double>(n * n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) acc += (K(i, j) - row_mean[i] - col_mean[j] + grand) * L(j, i);
  const double denom = static_cast<double>(n - 1);
  return acc / (denom * denom);
}

std::string Kernel::describe() const {
  if (kind == Kind::linear) return "linear";
  std::ostringstream os;
  os << "rbf(" << (sigma_is_fraction ? "frac=" : "sigma=") << sigma << ")";
  return os.str();
}

std::optional<Matrix> gram_matrix(const Matrix& X, const Kernel& kernel) {
  if (!X.all_finite()) throw InputError("gram_matrix: non-finite representation");
  if (kernel.kind == Kernel::Kind::linear) return matmul_nt(X, X);

  const std::size_t n = X.rows();
  Matrix d2(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      auto a = X.row(i);
      auto b = X.row(j);
      for (std::size_t k = 0; k < X.cols(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
      d2(i, j) = s;
      d2(j, i) = s;
    }
  double sigma = kernel.sigma;
  if (kernel.sigma_is_fraction) {
    std::vector<double> dist;
    dist.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) dist.push_back(std::sqrt(d2(i, j)));
    if (dist.empty()) return std::nullopt;
    const auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
    std::nth_element(dist.begin(), mid, dist.end());
    double median = *mid;
    if (dist.size() % 2 == 0) median = 0.5 * (median + *std::max_element(dist.begin(), mid));
    sigma *= median;
  }
  if (!(sigma > 0.0)) return std::nullopt;
  const double inv = 1.0 / (2.0 * sigma * sigma);
  Matrix K(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) K(i, j) = std::exp(-d2(i, j) * inv);
  return K;
}

CkaValue cka_from_grams(const Matrix& Kx, const Matrix& Ky) {
  const double xy = hsic(Kx, Ky);
  const double xx = hsic(Kx, Kx);
  const double yy = hsic(Ky, Ky);
  if (!(xx > 0.0) || !(yy > 0.0)) return CkaValue::undefined("zero self-HSIC (constant representation)");
  return CkaValue{xy / std::sqrt(xx * yy), true, {}};
}

CkaValue cka(const Matrix& X, const Matrix& Y, const Kernel& kernel) {
  if (X.rows() != Y.rows()) throw InputError("cka: sample counts differ");
  if (X.rows() < 3) throw InputError("cka: need at least 3 samples");
  const auto Kx = gram_matrix(X, kernel);
  const auto Ky = gram_matrix(Y, kernel);
  if (!Kx || !Ky) return CkaValue::undefined("zero RBF bandwidth (identical rows)");
  return cka_from_grams(*Kx, *Ky);
}

namespace {

Matrix center_columns(const Matrix& X) {
  Matrix out = X;
  Matrix mean = column_sums(X);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) -= mean[j] / static_cast<double>(X.rows());
  return out;
}

}  // namespace

double linear_cka_features(const Matrix& X, const Matrix& Y) {
  if (X.rows() != Y.rows()) throw InputError("linear_cka_features: sample counts differ");
  const Matrix xc = center_columns(X);
  const Matrix yc = center_columns(Y);
  const double cross = frobenius_norm(matmul_tn(yc, xc));
  return cross * cross / (frobenius_norm(matmul_tn(xc, xc)) * frobenius_norm(matmul_tn(yc, yc)));
}

std::vector<ActivationSet> capture_activations(const ModuleGrid& grid, const TaskSpec& task, const Dataset& samples,
                                               std::size_t n) {
  if (samples.size() != n) {
    throw InputError("capture_activations: requested " + std::to_string(n) + " samples, got " +
                     std::to_string(samples.size()));
  }
  std::vector<std::size_t> counts(samples.classes, 0);
  for (Label y : samples.labels) {
    if (y >= samples.classes) throw InputError("capture_activations: label out of range");
    ++counts[y];
  }
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  if (*hi - *lo > 1) throw InputError("capture_activations: samples are not class-balanced");

  const ForwardResult fr = forward_task(grid, task, samples.features);
  std::vector<ActivationSet> out;
  for (std::size_t l = 0; l < grid.shape().layers; ++l) {
    ActivationSet set{task.id, l, fr.tape.h[l + 1], {}, {}};
    for (const auto& tr : fr.tape.modules[l]) {
      set.modules.push_back(tr.module);
      set.module_reps.push_back(tr.out);
    }
    out.push_back(std::move(set));
  }
  return out;
}

std::optional<bool> CkaReport::middle_more_similar() const {
  if (layer_cka.size() < 3) return std::nullopt;
  for (const auto& v : layer_cka)
    if (!v.defined) return std::nullopt;
  double mid = 0.0;
  for (std::size_t l = 1; l + 1 < layer_cka.size(); ++l) mid += layer_cka[l].value;
  mid /= static_cast<double>(layer_cka.size() - 2);
  return mid > std::max(layer_cka.front().value, layer_cka.back().value);
}

CkaReport layerwise_cka_report(std::span<const ActivationSet> set_a, std::span<const ActivationSet> set_b,
                               const Kernel& kernel, std::string setup) {
  if (set_a.size() != set_b.size() || set_a.empty()) {
    throw InputError("layerwise_cka_report: activation sets cover different layers");
  }
  CkaReport r;
  r.setup = std::move(setup);
  r.kernel = kernel;
  r.task_a = set_a.front().task;
  r.task_b = set_b.front().task;
  for (std::size_t l = 0; l < set_a.size(); ++l) {
    const ActivationSet& a = set_a[l];
    const ActivationSet& b = set_b[l];
    if (a.rep.rows() != b.rep.rows()) throw InputError("layerwise_cka_report: sample counts differ");
    r.layer_cka.push_back(cka(a.rep, b.rep, kernel));

    ModulePairMatrix pm;
    std::vector<const Matrix*> reps;
    for (const ActivationSet* s : {&a, &b}) {
      for (std::size_t i = 0; i < s->modules.size(); ++i) {
        pm.labels.push_back("t" + std::to_string(s->task) + ":m" + std::to_string(s->modules[i]));
        pm.tasks.push_back(s->task);
        pm.modules.push_back(s->modules[i]);
        reps.push_back(&s->module_reps[i]);
      }
    }
    std::vector<std::optional<Matrix>> grams;
    for (const Matrix* rep : reps) grams.push_back(gram_matrix(*rep, kernel));
    const std::size_t k = reps.size();
    pm.values = Matrix(k, k, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = i; j < k; ++j) {
        if (!grams[i] || !grams[j]) continue;
        const CkaValue v = cka_from_grams(*grams[i], *grams[j]);
        pm.values(i, j) = v.value;
        pm.values(j, i) = v.value;
      }
    r.module_pairs.push_back(std::move(pm));

    std::vector<std::size_t> shared;
    for (std::size_t m : a.modules)
      if (std::find(b.modules.begin(), b.modules.end(), m) != b.modules.end()) shared.push_back(m);
    r.shared_modules.push_back(std::move(shared));
  }
  return r;
}

CkaReport average_reports(std::span<const CkaReport> reports) {
  if (reports.empty()) throw InputError("average_reports: nothing to average");
  CkaReport out = reports.front();
  const double runs = static_cast<double>(reports.size());
  for (std::size_t l = 0; l < out.layer_cka.size(); ++l) {
    double sum = 0.0;
    bool defined = true;
    for (const auto& r : reports) {
      if (r.layer_cka.size() != out.layer_cka.size() || r.setup != out.setup) {
        throw InputError("average_reports: reports describe different setups");
      }
      defined = defined && r.layer_cka[l].defined;
      sum += r.layer_cka[l].value;
    }
    out.layer_cka[l] = defined ? CkaValue{sum / runs, true, {}} : CkaValue::undefined("undefined in some run");
    Matrix& acc = out.module_pairs[l].values;
    for (std::size_t i = 0; i < acc.size(); ++i) {
      double s = 0.0;
      for (const auto& r : reports) s += r.module_pairs[l].values[i];
      acc[i] = s / runs;  // NaN propagates
    }
  }
  out.runs = reports.size();
  return out;
}

double clamp_for_display(double cka_value) { return std::clamp(cka_value, 0.0, 1.0); }

nlohmann::json to_json(const SharingProfile& profile) {
  nlohmann::json hist = nlohmann::json::object();
  for (std::size_t t = 0; t < profile.histogram.size(); ++t) hist[std::to_string(t)] = profile.histogram[t];
  return {{"tasks", profile.tasks}, {"histogram", hist}, {"per_layer", profile.per_layer}, {"usage", profile.usage}};
}

namespace {

nlohmann::json value_json(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

}  // namespace

nlohmann::json to_json(const CkaReport& report) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < report.layer_cka.size(); ++l) {
    const auto& v = report.layer_cka[l];
    const auto& pm = report.module_pairs[l];
    nlohmann::json matrix = nlohmann::json::array();
    for (std::size_t i = 0; i < pm.values.rows(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t j = 0; j < pm.values.cols(); ++j) row.push_back(value_json(pm.values(i, j)));
      matrix.push_back(std::move(row));
    }
    nlohmann::json entry{{"layer", l},
                         {"cka", v.defined ? nlohmann::json(v.value) : nlohmann::json(nullptr)},
                         {"cka_display", v.defined ? nlohmann::json(clamp_for_display(v.value)) : nlohmann::json(nullptr)},
                         {"undefined", !v.defined},
                         {"module_labels", pm.labels},
                         {"module_cka", matrix},
                         {"shared_modules", report.shared_modules[l]}};
    if (!v.defined) entry["reason"] = v.reason;
    layers.push_back(std::move(entry));
  }
  const auto mid = report.middle_more_similar();
  return {{"setup", report.setup},
          {"kernel", report.kernel.describe()},
          {"tasks", {report.task_a, report.task_b}},
          {"runs", report.runs},
          {"layers", layers},
          {"middle_more_similar", mid ? nlohmann::json(*mid) : nlohmann::json(nullptr)}};
}

void write_heatmap_csv(const CkaReport& report, std::size_t layer, const std::filesystem::path& path) {
  if (layer >= report.module_pairs.size()) throw InputError("write_heatmap_csv: layer out of range");
  const auto& pm = report.module_pairs[layer];
  const auto& shared = report.shared_modules[layer];
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out.precision(17);
  out << "module";
  for (const auto& l : pm.labels) out << ',' << l;
  out << ",shared\n";
  for (std::size_t i = 0; i < pm.labels.size(); ++i) {
    out << pm.labels[i];
    for (std::size_t j = 0; j < pm.labels.size(); ++j) {
      out << ',';
      if (!std::isnan(pm.values(i, j))) out << pm.values(i, j);
    }
    const bool is_shared = std::find(shared.begin(), shared.end(), pm.modules[i]) != shared.end();
    out << ',' << (is_shared ? 1 : 0) << '\n';
  }
}

}  // namespace part
