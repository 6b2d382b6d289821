#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "coperc/autodiff/tensor.hpp"
#include "coperc/scene/geometry.hpp"

namespace coperc::models {

/// BEV grid over the ego frame. Row r spans y, column c spans x; cell index is
/// r * W + c.
struct GridConfig {
  double x_min = -28.16;
  double x_max = 28.16;
  double y_min = -7.68;
  double y_max = 7.68;
  double cell = 1.28;

  int width() const;   // W, cells along x
  int height() const;  // H, cells along y
  int cells() const { return width() * height(); }
  /// Throws std::invalid_argument unless both extents are whole multiples of
  /// the cell size.
  void validate() const;

  /// -1 when outside the grid.
  std::int64_t cell_of(double x, double y) const;
  Vec2 cell_center(std::int64_t cell) const;
  bool contains(double x, double y) const { return cell_of(x, y) >= 0; }
};

/// Per-point encoder input features, all translation invariant: offset to the
/// cell center and offset to the cell's point mean (cell units), intensity.
inline constexpr int kPointFeatures = 5;

/// Fixed-shape encoder input: `features` is (n_max, kPointFeatures) and `cells`
/// holds the cell index of every row as a double, -1 for padding.
struct PillarInput {
  ad::Tensor features;
  ad::Tensor cells;
};

/// Bins ego-frame points into the grid. Points outside the grid are dropped;
/// beyond `n_max` in-grid points the rest are truncated in input order.
PillarInput pillarize(std::span<const LidarPoint> points, const GridConfig& grid, std::int64_t n_max);

/// Number of points that fall in each cell, from a PillarInput.
std::vector<int> occupancy(const PillarInput& input, const GridConfig& grid);

}  // namespace coperc::models
