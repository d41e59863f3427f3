#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "knnmoe/common.hpp"

namespace knnmoe {

// Dense row-major 2-D tensor of doubles. Vectors are 1xN rows, scalars 1x1.
// rows*cols always equals data.size().
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), data(size_t(r) * size_t(c), 0.0) {
    if (r < 0 || c < 0) fail("tensor: negative dimension " + shape_str());
  }
  Tensor(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
    if (size_t(r) * size_t(c) != data.size())
      fail("tensor: shape " + shape_str() + " does not match " + std::to_string(data.size()) + " elements");
  }

  static Tensor zeros(int r, int c) { return Tensor(r, c); }
  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.data[0] = v;
    return t;
  }
  static Tensor row_vector(std::vector<double> v) {
    int c = int(v.size());
    return Tensor(1, c, std::move(v));
  }

  int size() const { return rows * cols; }

  double& at(int r, int c) { return data[size_t(r) * cols + c]; }
  double at(int r, int c) const { return data[size_t(r) * cols + c]; }

  double* row(int r) { return data.data() + size_t(r) * cols; }
  const double* row(int r) const { return data.data() + size_t(r) * cols; }
  std::span<const double> row_span(int r) const { return {row(r), size_t(cols)}; }

  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  std::string shape_str() const { return std::to_string(rows) + "x" + std::to_string(cols); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

}  // namespace knnmoe
