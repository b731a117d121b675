#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace pncnn {

/// Row-major H x W array of doubles.
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Grid(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {}

  std::size_t size() const { return data.size(); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  bool same_shape(const Grid& o) const { return rows == o.rows && cols == o.cols; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

}  // namespace pncnn
