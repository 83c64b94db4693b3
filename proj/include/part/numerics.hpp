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
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace part {

using Label = std::size_t;

/// Dense row-major matrix of doubles. Vectors are stored as 1×n matrices.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  bool all_finite() const noexcept;
  void fill(double value);

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);     // a * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // a^T * b
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a * b^T
Matrix transpose(const Matrix& a);
Matrix column_sums(const Matrix& a);                   // 1×cols
Matrix columns(const Matrix& a, std::size_t begin, std::size_t end);
void set_columns(Matrix& dst, std::size_t begin, const Matrix& src);
Matrix select_rows(const Matrix& a, std::span<const std::size_t> rows);
void add_in_place(Matrix& dst, const Matrix& src);
double frobenius_norm(const Matrix& a);

/// Adam moments and hyperparameters for one parameter tensor.
struct AdamState {
  std::size_t step = 0;
  Matrix m;
  Matrix v;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_shape(std::size_t rows, std::size_t cols, double lr = 1e-3);
};

struct AdamResult {
  Matrix params;
  AdamState state;
};

/// Bias-corrected Adam update. An all-zero gradient leaves the parameters
/// untouched (moments still decay and the step counter still advances).
AdamResult adam_step(const Matrix& params, const Matrix& grads, const AdamState& state);

/// In-place form of adam_step used by the trainers.
void adam_update(Matrix& params, const Matrix& grads, AdamState& state);

struct Slice {
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t width() const noexcept { return end - start; }
  bool operator==(const Slice&) const = default;
};

struct XentResult {
  double loss = 0.0;
  Matrix dlogits;  // same shape as the logits; zero outside the slice
};

/// Mean softmax cross-entropy where the softmax only spans columns
/// [slice.start, slice.end). Labels are relative to the slice.
XentResult softmax_xent_slice(const Matrix& logits, std::span<const Label> labels, Slice slice);

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central-difference gradient of f compared elementwise against
/// analytic_grad; returns max |a - g| / max(|a|, |g|, 1e-8).
double finite_diff_check(const ScalarFunction& f, std::span<const double> params,
                         std::span<const double> analytic_grad, double h);

}  // namespace part
