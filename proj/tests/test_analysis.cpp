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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "part/analysis.hpp"
#include "part/errors.hpp"
#include "test_util.hpp"

namespace part {
namespace {

using testing::random_matrix;

// Quadruple-sum evaluation of tr(K H L H) / (n-1)^2.
double hsic_naive(const Matrix& K, const Matrix& L) {
  const std::size_t n = K.rows();
  auto H = [n](std::size_t i, std::size_t j) { return (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(n); };
  double tr = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t l = 0; l < n; ++l) tr += K(i, j) * H(j, k) * L(k, l) * H(l, i);
  return tr / static_cast<double>((n - 1) * (n - 1));
}

Matrix center_columns(const Matrix& X) {
  Matrix c = X;
  const Matrix sums = column_sums(X);
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) c(i, j) -= sums[j] / static_cast<double>(X.rows());
  return c;
}

Matrix orthogonal(std::size_t p, Rng& rng) {
  // Gram-Schmidt on a random square matrix.
  Matrix q = random_matrix(p, p, rng);
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0.0;
      for (std::size_t i = 0; i < p; ++i) dot += q(i, j) * q(i, k);
      for (std::size_t i = 0; i < p; ++i) q(i, j) -= dot * q(i, k);
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < p; ++i) norm += q(i, j) * q(i, j);
    for (std::size_t i = 0; i < p; ++i) q(i, j) /= std::sqrt(norm);
  }
  return q;
}

TEST(Hsic, MatchesQuadrupleSum) {
  Rng rng(1);
  for (std::size_t n : {3u, 4u, 6u}) {
    const Matrix X = random_matrix(n, 3, rng);
    const Matrix Y = random_matrix(n, 2, rng);
    const Matrix K = matmul_nt(X, X);
    const Matrix L = matmul_nt(Y, Y);
    EXPECT_NEAR(hsic(K, L), hsic_naive(K, L), 1e-10);
    EXPECT_NEAR(hsic(K, K), hsic_naive(K, K), 1e-10);
  }
  // Orthonormal rows: K = I.
  Matrix I(5, 5);
  for (std::size_t i = 0; i < 5; ++i) I(i, i) = 1.0;
  EXPECT_GT(hsic(I, I), 0.0);
  EXPECT_NEAR(hsic(I, I), hsic_naive(I, I), 1e-12);
}

TEST(Hsic, ConstantKernelGivesZero) {
  Rng rng(2);
  const Matrix X = random_matrix(6, 3, rng);
  EXPECT_NEAR(hsic(matmul_nt(X, X), Matrix(6, 6, 2.5)), 0.0, 1e-12);
}

TEST(Hsic, Symmetric) {
  Rng rng(3);
  const Matrix X = random_matrix(7, 3, rng);
  const Matrix Y = random_matrix(7, 4, rng);
  const Matrix K = matmul_nt(X, X);
  const Matrix L = matmul_nt(Y, Y);
  EXPECT_NEAR(hsic(K, L), hsic(L, K), 1e-12);
}

TEST(Hsic, RejectsSmallOrMismatched) {
  EXPECT_THROW(hsic(Matrix(2, 2, 1.0), Matrix(2, 2, 1.0)), InputError);
  EXPECT_THROW(hsic(Matrix(3, 3, 1.0), Matrix(4, 4, 1.0)), InputError);
}

TEST(Cka, SelfSimilarityIsOne) {
  Rng rng(4);
  const Matrix X = random_matrix(40, 5, rng);
  for (const Kernel& k : {Kernel::linear(), Kernel::rbf(0.5), Kernel::rbf(2.0, false)}) {
    const CkaValue v = cka(X, X, k);
    ASSERT_TRUE(v.defined);
    EXPECT_NEAR(v.value, 1.0, 1e-12) << k.describe();
  }
}

TEST(Cka, InvariantToRotationAndScale) {
  Rng rng(5);
  const Matrix X = random_matrix(50, 6, rng);
  const Matrix Q = orthogonal(6, rng);
  Matrix scaled = X;
  for (double& v : scaled.values()) v *= -3.7;
  EXPECT_NEAR(cka(X, matmul(X, Q), Kernel::linear()).value, 1.0, 1e-10);
  EXPECT_NEAR(cka(X, scaled, Kernel::linear()).value, 1.0, 1e-10);
  // Median-fraction bandwidth follows the data scale, and distances are rotation invariant.
  EXPECT_NEAR(cka(X, scaled, Kernel::rbf(0.5)).value, 1.0, 1e-10);
  EXPECT_NEAR(cka(X, matmul(X, Q), Kernel::rbf(0.5)).value, 1.0, 1e-10);
}

TEST(Cka, IndependentRepresentationsAreDissimilar) {
  Rng rng(6);
  const Matrix X = random_matrix(1000, 16, rng);
  const Matrix Y = random_matrix(1000, 16, rng);
  EXPECT_LT(cka(X, Y, Kernel::linear()).value, 0.1);
}

TEST(Cka, RbfNullShrinksWithSampleSize) {
  // The biased estimator keeps a kernel-diagonal term that decays roughly as 1/n.
  Rng rng(6);
  const Matrix X = random_matrix(1000, 16, rng);
  const Matrix Y = random_matrix(1000, 16, rng);
  std::vector<std::size_t> head(250);
  for (std::size_t i = 0; i < head.size(); ++i) head[i] = i;
  const double small = cka(select_rows(X, head), select_rows(Y, head), Kernel::rbf(0.5)).value;
  const double large = cka(X, Y, Kernel::rbf(0.5)).value;
  EXPECT_LT(large, small);
  EXPECT_LT(large, 0.5 * small);
}

TEST(Cka, SymmetricAndInRange) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix X = random_matrix(20, 4, rng);
    Matrix Y = random_matrix(20, 3, rng);
    for (std::size_t i = 0; i < 20; ++i) Y(i, 0) += X(i, 0);
    for (const Kernel& k : {Kernel::linear(), Kernel::rbf(0.5)}) {
      const double xy = cka(X, Y, k).value;
      EXPECT_NEAR(xy, cka(Y, X, k).value, 1e-12);
      EXPECT_GE(xy, -1e-9);
      EXPECT_LE(xy, 1.0 + 1e-9);
    }
  }
}

TEST(Cka, LinearFormulasAgree) {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix X = random_matrix(30, 5, rng);
    Matrix Y = random_matrix(30, 7, rng);
    for (std::size_t i = 0; i < 30; ++i) Y(i, 2) += 0.5 * X(i, 1);
    const Matrix Xc = center_columns(X);
    const Matrix Yc = center_columns(Y);
    const double num = std::pow(frobenius_norm(matmul_tn(Yc, Xc)), 2);
    const double den = frobenius_norm(matmul_tn(Xc, Xc)) * frobenius_norm(matmul_tn(Yc, Yc));
    const double feature_form = num / den;
    EXPECT_NEAR(cka(X, Y, Kernel::linear()).value, feature_form, 1e-9);
    EXPECT_NEAR(linear_cka_features(X, Y), feature_form, 1e-9);
  }
}

TEST(Cka, ConstantRepresentationIsFlaggedUndefined) {
  Rng rng(9);
  const Matrix X = random_matrix(10, 3, rng);
  const Matrix C(10, 3, 1.0);
  for (const Kernel& k : {Kernel::linear(), Kernel::rbf(0.5)}) {
    const CkaValue v = cka(X, C, k);
    EXPECT_FALSE(v.defined);
    EXPECT_TRUE(std::isnan(v.value));
    EXPECT_FALSE(v.reason.empty());
  }
}

TEST(Cka, RbfGramUsesMedianFraction) {
  const Matrix X = Matrix::from_rows({{0.0}, {1.0}, {3.0}});
  // Pairwise distances 1, 3, 2: median 2, sigma = 0.5 * 2 = 1.
  const auto K = gram_matrix(X, Kernel::rbf(0.5));
  ASSERT_TRUE(K.has_value());
  EXPECT_NEAR((*K)(0, 1), std::exp(-1.0 / 2.0), 1e-15);
  EXPECT_NEAR((*K)(0, 2), std::exp(-9.0 / 2.0), 1e-15);
  const auto Kabs = gram_matrix(X, Kernel::rbf(0.5, false));
  EXPECT_NEAR((*Kabs)(1, 2), std::exp(-4.0 / 0.5), 1e-15);
  EXPECT_FALSE(gram_matrix(Matrix(3, 2, 1.0), Kernel::rbf(0.5)).has_value());
}

TEST(SharingProfile, FullPathsShareEverything) {
  const Path full{std::vector<std::vector<std::size_t>>(3, {0, 1, 2, 3})};
  const std::vector<Path> paths{full, full};
  const SharingProfile p = sharing_profile(paths, 4, 3);
  ASSERT_EQ(p.histogram.size(), 3u);
  EXPECT_EQ(p.histogram[2], 12u);
  EXPECT_EQ(p.histogram[0] + p.histogram[1], 0u);
}

TEST(SharingProfile, DisjointPaths) {
  const Path a{std::vector<std::vector<std::size_t>>(4, {0, 1})};
  const Path b{std::vector<std::vector<std::size_t>>(4, {3, 4})};
  const std::vector<Path> paths{a, b};
  const SharingProfile p = sharing_profile(paths, 6, 4);
  EXPECT_EQ(p.histogram[1], 2u * 2u * 4u);
  EXPECT_EQ(p.histogram[0], (6u - 4u) * 4u);
  EXPECT_EQ(p.histogram[2], 0u);
}

TEST(SharingProfile, MatchesBruteForceRecount) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t L = 5, M = 7, N = 3, k = 6;
    std::vector<Path> paths;
    for (std::size_t i = 0; i < k; ++i) paths.push_back(assign_random_path(M, N, L, rng));
    const SharingProfile p = sharing_profile(paths, M, L);
    std::vector<std::size_t> hist(k + 1, 0);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t m = 0; m < M; ++m) {
        std::size_t users = 0;
        for (const Path& path : paths)
          for (std::size_t s : path.selection[l]) users += s == m ? 1 : 0;
        ++hist[users];
        EXPECT_EQ(p.usage[l][m], users);
      }
    EXPECT_EQ(p.histogram, hist);
    std::size_t total = 0;
    for (std::size_t c : p.histogram) total += c;
    EXPECT_EQ(total, L * M);
    for (std::size_t l = 0; l < L; ++l) {
      std::size_t row = 0;
      for (std::size_t c : p.per_layer[l]) row += c;
      EXPECT_EQ(row, M);
    }
  }
}

TEST(SharingProfile, RejectsInconsistentPaths) {
  const Path bad{{{0, 9}}};
  const std::vector<Path> paths{bad};
  EXPECT_THROW(sharing_profile(paths, 4, 1), InputError);
  const Path short_path{{{0}}};
  const std::vector<Path> paths2{short_path};
  EXPECT_THROW(sharing_profile(paths2, 4, 2), InputError);
}

TEST(SharingProfile, BinomialExpectationClosedForm) {
  const double p = 1.0 / 3.0;
  const double expected = 8 * 12 * 210 * std::pow(p, 4) * std::pow(1 - p, 6);
  EXPECT_NEAR(expected_sharing_count(8, 12, 4, 10, 4), expected, 1e-12);
  EXPECT_NEAR(expected, 21.85, 0.01);
  double total = 0.0;
  for (std::size_t t = 0; t <= 10; ++t) total += expected_sharing_count(8, 12, 4, 10, t);
  EXPECT_NEAR(total, 96.0, 1e-9);
}

TEST(SharingProfile, EmpiricalHistogramFollowsBinomial) {
  const std::size_t L = 8, M = 12, N = 4, k = 10, R = 10000;
  Rng rng(11);
  std::vector<double> sum(k + 1, 0.0);
  std::vector<double> sum_sq(k + 1, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    std::vector<Path> paths;
    for (std::size_t i = 0; i < k; ++i) paths.push_back(assign_random_path(M, N, L, rng));
    const SharingProfile p = sharing_profile(paths, M, L);
    for (std::size_t t = 0; t <= k; ++t) {
      const double c = static_cast<double>(p.histogram[t]);
      sum[t] += c;
      sum_sq[t] += c * c;
    }
  }
  for (std::size_t t = 0; t <= k; ++t) {
    const double mean = sum[t] / R;
    const double var = std::max(sum_sq[t] / R - mean * mean, 0.0);
    // Standard error of the per-trial mean; floor covers bins that were never hit.
    const double se = std::max(std::sqrt(var / R), 1.0 / R);
    EXPECT_NEAR(mean, expected_sharing_count(L, M, N, k, t), 3.0 * se) << "t=" << t;
  }
}

struct CapturedPair {
  testing::ToyGrid toy;
  Dataset sample_a;
  Dataset sample_b;
};

CapturedPair captured_pair(std::uint64_t seed) {
  CapturedPair c{testing::make_toy_grid(GridShape{3, 4, 6, 8}, 2, 2, 3, NormMode::per_task, seed), {}, {}};
  testing::attach_synthetic(c.toy, 40, 3.0, seed);
  Rng rng(seed);
  c.sample_a = balanced_sample(*c.toy.tasks[0].val_ds, 24, rng);
  c.sample_b = balanced_sample(*c.toy.tasks[1].val_ds, 24, rng);
  return c;
}

TEST(CaptureActivations, ModuleRepsSumToLayerRep) {
  auto c = captured_pair(12);
  const auto sets = capture_activations(c.toy.grid, c.toy.tasks[0], c.sample_a, 24);
  ASSERT_EQ(sets.size(), 3u);
  for (const ActivationSet& s : sets) {
    EXPECT_EQ(s.modules, c.toy.tasks[0].path.selection[s.layer]);
    Matrix sum(24, 8);
    for (const Matrix& m : s.module_reps) add_in_place(sum, m);
    EXPECT_EQ(sum, s.rep);
  }
}

TEST(CaptureActivations, RepeatedCaptureIsIdentical) {
  auto c = captured_pair(13);
  const auto a = capture_activations(c.toy.grid, c.toy.tasks[1], c.sample_b, 24);
  const auto b = capture_activations(c.toy.grid, c.toy.tasks[1], c.sample_b, 24);
  for (std::size_t l = 0; l < a.size(); ++l) {
    EXPECT_EQ(a[l].rep, b[l].rep);
    EXPECT_EQ(a[l].module_reps, b[l].module_reps);
  }
}

TEST(CaptureActivations, RejectsShortOrImbalancedSamples) {
  auto c = captured_pair(14);
  EXPECT_THROW(capture_activations(c.toy.grid, c.toy.tasks[0], c.sample_a, 30), InputError);
  Dataset skewed = c.sample_a;
  std::size_t moved = 0;
  for (Label& y : skewed.labels)
    if (y != 0 && moved < 4) {
      y = 0;
      ++moved;
    }
  EXPECT_THROW(capture_activations(c.toy.grid, c.toy.tasks[0], skewed, 24), InputError);
}

TEST(LayerwiseCka, SameSetGivesOnes) {
  auto c = captured_pair(15);
  const auto a = capture_activations(c.toy.grid, c.toy.tasks[0], c.sample_a, 24);
  const CkaReport r = layerwise_cka_report(a, a, Kernel::rbf(0.5), "self");
  for (const CkaValue& v : r.layer_cka) EXPECT_NEAR(v.value, 1.0, 1e-12);
  for (const ModulePairMatrix& pm : r.module_pairs) {
    const std::size_t k = pm.labels.size();
    for (std::size_t i = 0; i < k; ++i) EXPECT_NEAR(pm.values(i, i), 1.0, 1e-12);
  }
}

TEST(LayerwiseCka, PairMatrixSymmetricWithSharedFlags) {
  auto c = captured_pair(16);
  // Shared module 1 at layer 0 only.
  c.toy.grid.assign_path(0, Path{{{0, 1}, {0, 1}, {0, 1}}});
  c.toy.grid.assign_path(1, Path{{{1, 2}, {2, 3}, {2, 3}}});
  const TaskSpec ta = c.toy.grid.task_spec(0);
  const TaskSpec tb = c.toy.grid.task_spec(1);
  const auto a = capture_activations(c.toy.grid, ta, c.sample_a, 24);
  const auto b = capture_activations(c.toy.grid, tb, c.sample_a, 24);
  const CkaReport r = layerwise_cka_report(a, b, Kernel::linear(), "layer 1");
  ASSERT_EQ(r.shared_modules.size(), 3u);
  EXPECT_EQ(r.shared_modules[0], (std::vector<std::size_t>{1}));
  EXPECT_TRUE(r.shared_modules[1].empty());
  const ModulePairMatrix& pm = r.module_pairs[0];
  EXPECT_EQ(pm.labels, (std::vector<std::string>{"t0:m0", "t0:m1", "t1:m1", "t1:m2"}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      if (!std::isnan(pm.values(i, j))) EXPECT_EQ(pm.values(i, j), pm.values(j, i));

  const auto dir = std::filesystem::temp_directory_path() / "part_heatmap_test.csv";
  write_heatmap_csv(r, 0, dir);
  std::ifstream in(dir);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "module,t0:m0,t0:m1,t1:m1,t1:m2,shared");
  std::vector<char> flags;
  for (std::string line; std::getline(in, line);) flags.push_back(line.back());
  EXPECT_EQ(flags, (std::vector<char>{'0', '1', '1', '0'}));
  std::filesystem::remove(dir);
}

TEST(LayerwiseCka, MiddleLayerOrdering) {
  CkaReport r;
  r.layer_cka = {{0.4, true, {}}, {0.8, true, {}}, {0.7, true, {}}, {0.5, true, {}}};
  EXPECT_EQ(r.middle_more_similar(), std::optional<bool>(true));
  r.layer_cka[0].value = 0.9;
  EXPECT_EQ(r.middle_more_similar(), std::optional<bool>(false));
  r.layer_cka[1] = CkaValue::undefined("constant");
  EXPECT_FALSE(r.middle_more_similar().has_value());
}

TEST(LayerwiseCka, AveragingTakesMeanOfValues) {
  auto c = captured_pair(17);
  const auto a = capture_activations(c.toy.grid, c.toy.tasks[0], c.sample_a, 24);
  const auto b = capture_activations(c.toy.grid, c.toy.tasks[1], c.sample_b, 24);
  const CkaReport r1 = layerwise_cka_report(a, b, Kernel::linear(), "x");
  const CkaReport r2 = layerwise_cka_report(a, a, Kernel::linear(), "x");
  const std::vector<CkaReport> both{r1, r2};
  const CkaReport avg = average_reports(both);
  EXPECT_EQ(avg.runs, 2u);
  for (std::size_t l = 0; l < avg.layer_cka.size(); ++l)
    EXPECT_NEAR(avg.layer_cka[l].value, 0.5 * (r1.layer_cka[l].value + 1.0), 1e-12);
}

TEST(Display, ClampKeepsRawInJson) {
  EXPECT_EQ(clamp_for_display(1.0 + 1e-12), 1.0);
  EXPECT_EQ(clamp_for_display(-1e-12), 0.0);
  CkaReport r;
  r.layer_cka = {{1.0 + 1e-12, true, {}}};
  r.module_pairs.resize(1);
  r.shared_modules.resize(1);
  const auto j = to_json(r);
  EXPECT_EQ(j["layers"][0]["cka"].get<double>(), 1.0 + 1e-12);
  EXPECT_EQ(j["layers"][0]["cka_display"].get<double>(), 1.0);
}

}  // namespace
}  // namespace part
