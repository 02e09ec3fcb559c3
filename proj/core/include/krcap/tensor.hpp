#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

namespace krcap {

// Dense row-major matrix of doubles. Vectors are 1xN or Nx1, scalars 1x1.
// Everything numeric in the project runs in 64-bit floats.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Tensor() = default;
  Tensor(int r, int c, double fill = 0.0)
      : rows(r), cols(c), a(static_cast<size_t>(r) * c, fill) {}

  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.a[0] = v;
    return t;
  }

  double& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }

  size_t size() const { return a.size(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : a)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Per-position vocabulary logits for a forced token sequence: row r predicts
// the token at position r+1.
using LogitsMatrix = Tensor;

}  // namespace krcap
