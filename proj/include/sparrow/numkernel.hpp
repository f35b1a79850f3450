// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace sparrow {

// Dense row-major matrix of 32-bit floats. Every kernel in the project reads
// and writes this type; accumulation inside kernels is done in double.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  void fill(float v);
  // Appends the rows of `other` (column counts must agree; an empty matrix adopts them).
  void append_rows(const Matrix& other);
  void append_row(std::span<const float> r);
  Matrix slice_rows(std::size_t begin, std::size_t end) const;

  bool all_finite() const;
  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
// y += x * w for a single row; the accumulation order over k is fixed so that
// the result of a row never depends on how many rows are processed together.
void matmul_row(std::span<const float> x, const Matrix& w, std::span<float> out);
double max_abs_diff(const Matrix& a, const Matrix& b);

std::vector<double> softmax(std::span<const float> v, double temperature = 1.0);
std::vector<double> softmax(std::span<const double> v, double temperature = 1.0);
std::vector<double> log_softmax(std::span<const float> v);
std::vector<float> rmsnorm(std::span<const float> v, std::span<const float> gain, double eps);
double cosine_similarity(std::span<const float> u, std::span<const float> v);
std::size_t argmax(std::span<const float> v);
std::size_t argmax(std::span<const double> v);

// Counter-based generator: draw n is SplitMix64(seed + n * golden_gamma).
// The sequence depends only on the seed and the number of prior draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Independent stream derived from this generator's seed and a stream id.
  Rng fork(std::uint64_t stream) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

std::size_t sample_categorical(std::span<const double> p, Rng& rng);

}  // namespace sparrow
