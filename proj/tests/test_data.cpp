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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "part/data.hpp"
#include "part/errors.hpp"
#include "test_util.hpp"

namespace part {
namespace {

namespace fs = std::filesystem;

// Multinomial logistic regression by full-batch gradient descent, kept
// separate from the library's loss code.
double linear_probe_accuracy(const Dataset& train, const Dataset& val, int iters = 300, double lr = 0.5) {
  const std::size_t d = train.dims();
  const std::size_t c = train.classes;
  std::vector<double> W(d * c, 0.0);
  std::vector<double> b(c, 0.0);
  std::vector<double> p(c);
  auto scores = [&](std::span<const double> x, std::vector<double>& out) {
    for (std::size_t k = 0; k < c; ++k) {
      out[k] = b[k];
      for (std::size_t j = 0; j < d; ++j) out[k] += x[j] * W[j * c + k];
    }
  };
  for (int it = 0; it < iters; ++it) {
    std::vector<double> gW(d * c, 0.0);
    std::vector<double> gb(c, 0.0);
    for (std::size_t i = 0; i < train.size(); ++i) {
      const auto x = train.features.row(i);
      scores(x, p);
      const double mx = *std::max_element(p.begin(), p.end());
      double z = 0.0;
      for (double& v : p) z += (v = std::exp(v - mx));
      for (std::size_t k = 0; k < c; ++k) {
        const double g = p[k] / z - (train.labels[i] == k ? 1.0 : 0.0);
        gb[k] += g;
        for (std::size_t j = 0; j < d; ++j) gW[j * c + k] += g * x[j];
      }
    }
    const double scale = lr / static_cast<double>(train.size());
    for (std::size_t i = 0; i < W.size(); ++i) W[i] -= scale * gW[i];
    for (std::size_t k = 0; k < c; ++k) b[k] -= scale * gb[k];
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    scores(val.features.row(i), p);
    const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    correct += best == val.labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(val.size());
}

std::vector<std::size_t> class_counts(const Dataset& ds) {
  std::vector<std::size_t> counts(ds.classes, 0);
  for (Label y : ds.labels) ++counts[y];
  return counts;
}

Dataset toy_dataset(std::size_t n, std::size_t classes, std::size_t dims, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.classes = classes;
  ds.features = testing::random_matrix(n, dims, rng);
  for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(i % classes);
  return ds;
}

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("part_data_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path write(const std::string& name, const std::string& body) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << body;
    return p;
  }
  fs::path dir_;
};

TEST(GenSyntheticTask, WideMarginIsLinearlySeparable) {
  Rng rng(1);
  auto split = gen_synthetic_task(rng, 2, 200, 8, 8.0);
  standardize(split.train, split.val);
  EXPECT_GE(linear_probe_accuracy(split.train, split.val), 0.99);
}

TEST(GenSyntheticTask, TinyMarginIsAtChance) {
  double mean = 0.0;
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(100 + s);
    auto split = gen_synthetic_task(rng, 4, 500, 8, 0.01);
    standardize(split.train, split.val);
    mean += linear_probe_accuracy(split.train, split.val) / seeds;
  }
  EXPECT_NEAR(mean, 0.25, 0.05);
}

TEST(GenSyntheticTask, ClassMeansAreSeparatedByMargin) {
  for (std::size_t c : {3u, 6u}) {
    Rng rng(7);
    const auto split = gen_synthetic_task(rng, c, 4000, 4, 5.0);
    // Empirical class means from all samples.
    std::vector<std::vector<double>> mean(c, std::vector<double>(4, 0.0));
    std::vector<std::size_t> count(c, 0);
    for (const Dataset* ds : {&split.train, &split.val})
      for (std::size_t i = 0; i < ds->size(); ++i) {
        ++count[ds->labels[i]];
        for (std::size_t j = 0; j < 4; ++j) mean[ds->labels[i]][j] += ds->features(i, j);
      }
    for (std::size_t k = 0; k < c; ++k)
      for (double& v : mean[k]) v /= static_cast<double>(count[k]);
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = a + 1; b < c; ++b) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < 4; ++j) d2 += (mean[a][j] - mean[b][j]) * (mean[a][j] - mean[b][j]);
        // Sampling noise of a 4000-sample mean is about 0.02 per coordinate.
        EXPECT_GE(std::sqrt(d2), 5.0 - 0.15);
      }
  }
}

TEST(GenSyntheticTask, StratifiedEightyTwentySplit) {
  Rng rng(3);
  const auto split = gen_synthetic_task(rng, 5, 50, 3, 2.0, "t");
  EXPECT_EQ(class_counts(split.train), std::vector<std::size_t>(5, 40));
  EXPECT_EQ(class_counts(split.val), std::vector<std::size_t>(5, 10));
  EXPECT_NO_THROW(split.train.validate());
  EXPECT_NO_THROW(split.val.validate());
  EXPECT_EQ(split.train.name, "t/train");
  EXPECT_EQ(split.val.name, "t/val");
}

TEST(GenSyntheticTask, SameSeedSameData) {
  Rng a(42);
  Rng b(42);
  const auto sa = gen_synthetic_task(a, 3, 30, 4, 3.0);
  const auto sb = gen_synthetic_task(b, 3, 30, 4, 3.0);
  EXPECT_EQ(sa.train, sb.train);
  EXPECT_EQ(sa.val, sb.val);
  EXPECT_TRUE(std::equal(sa.train.features.values().begin(), sa.train.features.values().end(),
                         sb.train.features.values().begin(),
                         [](double x, double y) { return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y); }));
}

TEST(GenSyntheticTask, RejectsDegenerateParameters) {
  Rng rng(1);
  EXPECT_THROW(gen_synthetic_task(rng, 1, 10, 3, 1.0), InputError);
  EXPECT_THROW(gen_synthetic_task(rng, 2, 10, 1, 1.0), InputError);
  EXPECT_THROW(gen_synthetic_task(rng, 2, 10, 3, 0.0), InputError);
  EXPECT_THROW(gen_synthetic_task(rng, 2, 10, 3, -1.0), InputError);
}

TEST(Standardize, TrainStatisticsApplyToBoth) {
  Rng rng(5);
  auto split = gen_synthetic_task(rng, 3, 100, 4, 3.0);
  const Dataset raw_val = split.val;
  standardize(split.train, split.val);
  ASSERT_TRUE(split.train.standardization.has_value());
  const Matrix mean = column_sums(split.train.features);
  for (double v : mean.values()) EXPECT_NEAR(v / static_cast<double>(split.train.size()), 0.0, 1e-12);
  const Standardization& s = *split.train.standardization;
  for (std::size_t i = 0; i < raw_val.size(); ++i)
    for (std::size_t j = 0; j < 4; ++j)
      EXPECT_NEAR(split.val.features(i, j), (raw_val.features(i, j) - s.mean[j]) / s.scale[j], 1e-12);
}

TEST(OversampleToEqual, PadsToMaxSize) {
  Rng rng(1);
  const std::vector<Dataset> in{toy_dataset(100, 4, 3, 1), toy_dataset(250, 4, 3, 2), toy_dataset(250, 5, 3, 3)};
  const auto out = oversample_to_equal(in, rng);
  for (const Dataset& ds : out) EXPECT_EQ(ds.size(), 250u);
  // Originals are a prefix, padding comes from the original rows.
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_EQ(out[0].labels[i], in[0].labels[i]);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out[0].features(i, j), in[0].features(i, j));
  }
  for (std::size_t i = 100; i < 250; ++i) {
    bool found = false;
    for (std::size_t r = 0; r < 100 && !found; ++r) {
      found = out[0].labels[i] == in[0].labels[r] &&
              std::equal(out[0].features.row(i).begin(), out[0].features.row(i).end(), in[0].features.row(r).begin());
    }
    EXPECT_TRUE(found) << "padding row " << i;
  }
}

TEST(OversampleToEqual, EqualSizesUnchanged) {
  Rng rng(1);
  const std::vector<Dataset> in{toy_dataset(50, 2, 3, 1), toy_dataset(50, 3, 3, 2)};
  const auto out = oversample_to_equal(in, rng);
  EXPECT_EQ(out, in);
}

TEST(OversampleToEqual, PreservesClassProportions) {
  Dataset small = toy_dataset(10, 2, 2, 9);
  for (std::size_t i = 0; i < 10; ++i) small.labels[i] = i < 3 ? 0 : 1;
  const Dataset big = toy_dataset(1000, 2, 2, 10);
  const std::vector<Dataset> in{small, big};
  double mean_share = 0.0;
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed));
    const auto out = oversample_to_equal(in, rng);
    mean_share += static_cast<double>(class_counts(out[0])[0]) / 1000.0 / 100.0;
  }
  EXPECT_NEAR(mean_share, 0.3, 0.05);
}

TEST(OversampleToEqual, EmptyDatasetIsInputError) {
  Rng rng(1);
  const std::vector<Dataset> in{toy_dataset(10, 2, 2, 1), Dataset{}};
  EXPECT_THROW(oversample_to_equal(in, rng), InputError);
}

TEST_F(TempDir, CsvTwoRows) {
  const Dataset ds = load_csv(write("two.csv", "label,f0,f1\n0,1.5,2\n1,-3,4e-1\n"));
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.classes, 2u);
  EXPECT_EQ(ds.dims(), 2u);
  EXPECT_DOUBLE_EQ(ds.features(1, 1), 0.4);
}

TEST_F(TempDir, CsvLabelColumnAnywhere) {
  const Dataset ds = load_csv(write("mid.csv", "f0,label,f1\n1,1,2\n3,0,4\n"));
  EXPECT_EQ(ds.labels, (std::vector<Label>{1, 0}));
  EXPECT_EQ(ds.features(0, 1), 2.0);
}

TEST_F(TempDir, CsvLabelGapIsParseError) {
  try {
    load_csv(write("gap.csv", "label,f0\n0,1\n2,3\n"));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("non-contiguous labels"), std::string::npos);
  }
}

TEST_F(TempDir, CsvErrorsCarryLineNumbers) {
  try {
    load_csv(write("bad.csv", "label,f0\n0,1\n1,abc\n"));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_csv(write("nohdr.csv", "")), ParseError);
  EXPECT_THROW(load_csv(write("nolabel.csv", "f0,f1\n1,2\n")), ParseError);
  EXPECT_THROW(load_csv(write("neg.csv", "label,f0\n-1,1\n0,2\n")), ParseError);
  EXPECT_THROW(load_csv(write("ragged.csv", "label,f0,f1\n0,1\n1,2,3\n")), ParseError);
  EXPECT_THROW(load_csv(dir_ / "missing.csv"), ParseError);
}

TEST_F(TempDir, CsvRoundTrip) {
  Rng rng(4);
  const auto split = gen_synthetic_task(rng, 3, 20, 5, 2.0);
  Dataset ds = split.train;
  ds.name.clear();
  const fs::path p = dir_ / "rt.csv";
  save_csv(ds, p);
  Dataset back = load_csv(p);
  back.name.clear();
  EXPECT_EQ(back, ds);
}

TEST(NextBatches, ShortFinalBatch) {
  Rng rng(1);
  Dataset ds = toy_dataset(10, 2, 2, 1);
  BatchPlan plan(10, 4, rng);
  const auto batches = next_batches(ds, plan, 3);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[0].y.size(), 4u);
  EXPECT_EQ(batches[1].y.size(), 4u);
  EXPECT_EQ(batches[2].y.size(), 2u);
  EXPECT_EQ(plan.cursor(), 10u);
  EXPECT_TRUE(plan.exhausted());
  EXPECT_TRUE(next_batches(ds, plan, 2).empty());
}

TEST(NextBatches, EpochCoversEveryIndexOnce) {
  Rng rng(2);
  Dataset ds = toy_dataset(37, 3, 2, 2);
  BatchPlan plan(37, 5, rng);
  std::vector<std::size_t> seen;
  while (!plan.exhausted()) {
    for (const Batch& b : next_batches(ds, plan, 2)) {
      for (std::size_t r = 0; r < b.indices.size(); ++r) {
        EXPECT_EQ(b.y[r], ds.labels[b.indices[r]]);
        EXPECT_EQ(b.x(r, 0), ds.features(b.indices[r], 0));
      }
      seen.insert(seen.end(), b.indices.begin(), b.indices.end());
    }
  }
  std::sort(seen.begin(), seen.end());
  std::vector<std::size_t> all(37);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(seen, all);
}

TEST(NextBatches, FewerOnlyWhenExhausted) {
  Rng rng(3);
  Dataset ds = toy_dataset(20, 2, 2, 3);
  BatchPlan plan(20, 3, rng);
  EXPECT_EQ(plan.batches_per_epoch(), 7u);
  EXPECT_EQ(next_batches(ds, plan, 4).size(), 4u);
  EXPECT_EQ(plan.remaining_batches(), 3u);
  EXPECT_EQ(next_batches(ds, plan, 4).size(), 3u);
}

TEST(BatchPlan, ReshuffleChangesOrder) {
  Rng rng(4);
  BatchPlan plan(50, 8, rng);
  const auto first = plan.order();
  plan.reshuffle(rng);
  EXPECT_NE(plan.order(), first);
  EXPECT_EQ(plan.cursor(), 0u);
  auto sorted = plan.order();
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> all(50);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(sorted, all);
}

TEST(BalancedSample, ClassCountsDifferByAtMostOne) {
  Rng rng(8);
  Dataset ds = toy_dataset(90, 3, 2, 8);
  const Dataset s = balanced_sample(ds, 10, rng);
  EXPECT_EQ(s.size(), 10u);
  const auto counts = class_counts(s);
  EXPECT_LE(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()), 1u);
  EXPECT_TRUE(std::is_sorted(s.labels.begin(), s.labels.end()));
}

TEST(Dataset, ValidateRejectsBrokenInvariants) {
  Dataset ds = toy_dataset(4, 2, 2, 1);
  EXPECT_NO_THROW(ds.validate());
  Dataset missing = ds;
  missing.labels = {0, 0, 0, 0};
  EXPECT_THROW(missing.validate(), InputError);
  Dataset nan = ds;
  nan.features(0, 0) = std::nan("");
  EXPECT_THROW(nan.validate(), InputError);
}

}  // namespace
}  // namespace part
