// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include "sparrow/numkernel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace sparrow {

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw std::invalid_argument("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

void Matrix::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Matrix::append_rows(const Matrix& other) {
  if (other.rows_ == 0) return;
  if (rows_ == 0 && data_.empty()) cols_ = other.cols_;
  if (other.cols_ != cols_) throw std::invalid_argument("Matrix::append_rows: column mismatch");
  data_.insert(data_.end(), other.data_.begin(), other.data_.end());
  rows_ += other.rows_;
}

void Matrix::append_row(std::span<const float> r) {
  if (rows_ == 0 && data_.empty()) cols_ = r.size();
  if (r.size() != cols_) throw std::invalid_argument("Matrix::append_row: column mismatch");
  data_.insert(data_.end(), r.begin(), r.end());
  ++rows_;
}

Matrix Matrix::slice_rows(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows_) throw std::out_of_range("Matrix::slice_rows");
  return Matrix(end - begin, cols_,
                std::vector<float>(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
                                   data_.begin() + static_cast<std::ptrdiff_t>(end * cols_)));
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void matmul_row(std::span<const float> x, const Matrix& w, std::span<float> out) {
  const std::size_t k_dim = w.rows();
  const std::size_t m = w.cols();
  thread_local std::vector<double> acc;
  acc.assign(m, 0.0);
  double* a = acc.data();
  for (std::size_t k = 0; k < k_dim; ++k) {
    const double xk = x[k];
    if (xk == 0.0) continue;
    const float* wr = w.data() + k * m;
    for (std::size_t j = 0; j < m; ++j) a[j] += xk * static_cast<double>(wr[j]);
  }
  for (std::size_t j = 0; j < m; ++j) out[j] = static_cast<float>(a[j]);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: dimension mismatch " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " * " + std::to_string(b.rows()) +
                                "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) matmul_row(a.row(i), b, out.row(i));
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.values()[i]) - b.values()[i]));
  return m;
}

namespace {

template <typename T>
std::vector<double> softmax_impl(std::span<const T> v, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw std::invalid_argument("softmax: temperature must be positive");
  if (v.empty()) throw std::invalid_argument("softmax: empty input");
  double mx = -std::numeric_limits<double>::infinity();
  for (T x : v) {
    if (!std::isfinite(static_cast<double>(x))) throw std::invalid_argument("softmax: non-finite input");
    mx = std::max(mx, static_cast<double>(x) / temperature);
  }
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(static_cast<double>(v[i]) / temperature - mx);
    sum += out[i];
  }
  for (double& o : out) o /= sum;
  return out;
}

}  // namespace

std::vector<double> softmax(std::span<const float> v, double temperature) {
  return softmax_impl(v, temperature);
}

std::vector<double> softmax(std::span<const double> v, double temperature) {
  return softmax_impl(v, temperature);
}

std::vector<double> log_softmax(std::span<const float> v) {
  if (v.empty()) throw std::invalid_argument("log_softmax: empty input");
  double mx = -std::numeric_limits<double>::infinity();
  for (float x : v) mx = std::max(mx, static_cast<double>(x));
  double sum = 0.0;
  for (float x : v) sum += std::exp(static_cast<double>(x) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<double>(v[i]) - lse;
  return out;
}

std::vector<float> rmsnorm(std::span<const float> v, std::span<const float> gain, double eps) {
  if (v.size() != gain.size()) throw std::invalid_argument("rmsnorm: length mismatch");
  if (v.empty()) throw std::invalid_argument("rmsnorm: empty input");
  double ss = 0.0;
  for (float x : v) ss += static_cast<double>(x) * x;
  const double denom = std::sqrt(ss / static_cast<double>(v.size()) + eps);
  if (!(denom > 0.0)) throw std::invalid_argument("rmsnorm: zero vector with eps = 0");
  const double inv = 1.0 / denom;
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<float>(static_cast<double>(gain[i]) * v[i] * inv);
  return out;
}

double cosine_similarity(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += static_cast<double>(u[i]) * v[i];
    nu += static_cast<double>(u[i]) * u[i];
    nv += static_cast<double>(v[i]) * v[i];
  }
  if (nu == 0.0 || nv == 0.0) throw std::invalid_argument("cosine_similarity: zero vector");
  // sqrt(nu * nv) rather than sqrt(nu) * sqrt(nv): exact 1.0 for u == v.
  return std::clamp(dot / std::sqrt(nu * nv), -1.0, 1.0);
}

std::size_t argmax(std::span<const float> v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty input");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty input");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return splitmix64(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
  __extension__ using u128 = unsigned __int128;
  return static_cast<std::uint64_t>((static_cast<u128>(next_u64()) * n) >> 64);
}

Rng Rng::fork(std::uint64_t stream) const {
  return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x632BE59BD9B4E019ULL)));
}

std::size_t sample_categorical(std::span<const double> p, Rng& rng) {
  if (p.empty()) throw std::invalid_argument("sample_categorical: empty distribution");
  double total = 0.0;
  std::size_t last_positive = p.size();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0) || !std::isfinite(p[i]))
      throw std::invalid_argument("sample_categorical: invalid probability");
    total += p[i];
    if (p[i] > 0.0) last_positive = i;
  }
  if (std::abs(total - 1.0) > 1e-6)
    throw std::invalid_argument("sample_categorical: probabilities sum to " + std::to_string(total));
  const double u = rng.uniform() * total;
  double cum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    cum += p[i];
    if (p[i] > 0.0 && u < cum) return i;
  }
  return last_positive;
}

}  // namespace sparrow
