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

#include "part/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "part/errors.hpp"

namespace part {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ContractError("Matrix: data length " + std::to_string(data_.size()) +
                        " != " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ContractError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw ContractError(what);
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto src = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * src[j];
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), "matmul_tn: row counts differ");
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto dst = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aki * brow[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), "matmul_nt: column counts differ");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix column_sums(const Matrix& a) {
  Matrix out(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto src = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) out[j] += src[j];
  }
  return out;
}

Matrix columns(const Matrix& a, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= a.cols(), "columns: range out of bounds");
  Matrix out(a.rows(), end - begin);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = a(i, j);
  return out;
}

void set_columns(Matrix& dst, std::size_t begin, const Matrix& src) {
  require(dst.rows() == src.rows() && begin + src.cols() <= dst.cols(),
          "set_columns: range out of bounds");
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < src.cols(); ++j) dst(i, begin + j) = src(i, j);
}

Matrix select_rows(const Matrix& a, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < a.rows(), "select_rows: index out of bounds");
    std::copy_n(a.row(rows[i]).begin(), a.cols(), out.row(i).begin());
  }
  return out;
}

void add_in_place(Matrix& dst, const Matrix& src) {
  require(dst.same_shape(src), "add_in_place: shape mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

double frobenius_norm(const Matrix& a) {
  double acc = 0.0;
  for (double x : a.values()) acc += x * x;
  return std::sqrt(acc);
}

AdamState AdamState::for_shape(std::size_t rows, std::size_t cols, double lr) {
  AdamState s;
  s.m = Matrix(rows, cols);
  s.v = Matrix(rows, cols);
  s.lr = lr;
  return s;
}

void adam_update(Matrix& params, const Matrix& grads, AdamState& state) {
  if (!params.same_shape(grads) || !params.same_shape(state.m) || !params.same_shape(state.v)) {
    throw ContractError("adam_step: parameter, gradient and moment shapes differ");
  }
  if (!(state.lr > 0.0)) throw ContractError("adam_step: learning rate must be positive");

  state.step += 1;
  const bool zero_grad =
      std::all_of(grads.values().begin(), grads.values().end(), [](double g) { return g == 0.0; });
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  if (zero_grad) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i] *= b1;
      state.v[i] *= b2;
    }
    return;
  }
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

AdamResult adam_step(const Matrix& params, const Matrix& grads, const AdamState& state) {
  AdamResult out{params, state};
  adam_update(out.params, grads, out.state);
  return out;
}

XentResult softmax_xent_slice(const Matrix& logits, std::span<const Label> labels, Slice slice) {
  if (!(slice.start < slice.end && slice.end <= logits.cols())) {
    throw InputError("softmax_xent_slice: slice [" + std::to_string(slice.start) + "," +
                     std::to_string(slice.end) + ") invalid for " +
                     std::to_string(logits.cols()) + " logits");
  }
  if (labels.size() != logits.rows()) {
    throw ContractError("softmax_xent_slice: label count differs from batch size");
  }
  const std::size_t n = logits.rows();
  const std::size_t width = slice.width();
  XentResult out{0.0, Matrix(logits.rows(), logits.cols())};
  if (n == 0) return out;

  std::vector<double> prob(width);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= width) {
      throw InputError("softmax_xent_slice: label " + std::to_string(labels[i]) +
                       " outside slice of width " + std::to_string(width));
    }
    auto row = logits.row(i).subspan(slice.start, width);
    const double mx = *std::max_element(row.begin(), row.end());
    double denom = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      prob[j] = std::exp(row[j] - mx);
      denom += prob[j];
    }
    const double log_denom = std::log(denom);
    out.loss -= (row[labels[i]] - mx) - log_denom;
    for (std::size_t j = 0; j < width; ++j) {
      const double p = prob[j] / denom;
      out.dlogits(i, slice.start + j) = (p - (j == labels[i] ? 1.0 : 0.0)) / static_cast<double>(n);
    }
  }
  out.loss /= static_cast<double>(n);
  return out;
}

double finite_diff_check(const ScalarFunction& f, std::span<const double> params,
                         std::span<const double> analytic_grad, double h) {
  if (!(h >= 1e-6 && h <= 1e-4)) throw InputError("finite_diff_check: step must lie in [1e-6, 1e-4]");
  if (params.size() != analytic_grad.size()) {
    throw ContractError("finite_diff_check: gradient length differs from parameter length");
  }
  std::vector<double> probe(params.begin(), params.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double up = f(probe);
    probe[i] = saved - h;
    const double down = f(probe);
    probe[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_check: non-finite objective at parameter " + std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic_grad[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace part
