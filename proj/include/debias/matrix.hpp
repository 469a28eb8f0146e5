#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace debias {

// Row-major float matrix. Sample features live in float32 so that the
// in-memory representation matches the on-disk format exactly.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  float* row(std::size_t i) { return data.data() + i * cols; }
  const float* row(std::size_t i) const { return data.data() + i * cols; }
  std::span<const float> row_span(std::size_t i) const { return {row(i), cols}; }

  float& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  float at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  bool operator==(const Matrix&) const = default;
};

// Row-major double matrix, used for model internals (logits, probabilities,
// gradients) where float32 would not survive finite-difference checks.
struct DMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  DMatrix() = default;
  DMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }
  std::span<const double> row_span(std::size_t i) const { return {row(i), cols}; }

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  bool operator==(const DMatrix&) const = default;
};

}  // namespace debias
