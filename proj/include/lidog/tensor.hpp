#pragma once

#include <cstddef>
#include <numeric>
#include <vector>

namespace lidog {

// Row-major dense matrix of doubles. Rows are voxel cells for sparse feature
// grids and v*width+u pixels for dense BEV rasters.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> d;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), d(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return d[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return d[r * cols + c]; }
  double* row(std::size_t r) { return d.data() + r * cols; }
  const double* row(std::size_t r) const { return d.data() + r * cols; }

  bool operator==(const Mat&) const = default;
};

// N-dimensional parameter tensor (checkpoint unit).
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> d;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0)
      : shape(std::move(s)) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    d.assign(n, fill);
  }

  std::size_t size() const { return d.size(); }

  bool operator==(const Tensor&) const = default;
};

}  // namespace lidog
