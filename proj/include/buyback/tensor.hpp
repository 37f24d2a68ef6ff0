#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "buyback/errors.hpp"

namespace buyback {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  constexpr std::size_t size() const { return rows * cols; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

/// Dense row-major 2-D array of doubles. Vectors are stored as 1 x n rows.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : shape{rows, cols}, data(rows * cols, fill) {}
  Tensor(Shape s, std::vector<double> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.size()) throw ShapeError("tensor data does not match its shape");
  }

  static Tensor row(std::initializer_list<double> values) {
    return Tensor({1, values.size()}, std::vector<double>(values));
  }
  static Tensor column(std::vector<double> values) {
    const auto n = values.size();
    return Tensor({n, 1}, std::move(values));
  }
  static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }

  std::size_t rows() const { return shape.rows; }
  std::size_t cols() const { return shape.cols; }
  std::size_t size() const { return data.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * shape.cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * shape.cols + c]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::span<double> values() { return data; }
  std::span<const double> values() const { return data; }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

}  // namespace buyback
