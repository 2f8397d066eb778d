#pragma once

#include <cstddef>
#include <vector>

namespace ctlab {

/// Row-major 2D raster.
template <class T>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  std::size_t size() const { return data.size(); }
  bool same_shape(int r, int c) const { return rows == r && cols == c; }
  template <class U>
  bool same_shape(const Grid<U>& o) const { return rows == o.rows && cols == o.cols; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using BinaryGrid = Grid<unsigned char>;

}  // namespace ctlab
