#include "coperc/models/bev.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace coperc::models {
namespace {

int cells_along(double lo, double hi, double cell, const char* axis) {
  const double n = (hi - lo) / cell;
  const double r = std::round(n);
  if (!(cell > 0.0) || r < 1.0 || std::abs(n - r) > 1e-9) {
    throw std::invalid_argument(std::string("grid ") + axis + " extent is not a whole number of cells");
  }
  return static_cast<int>(r);
}

}  // namespace

int GridConfig::width() const { return cells_along(x_min, x_max, cell, "x"); }
int GridConfig::height() const { return cells_along(y_min, y_max, cell, "y"); }

void GridConfig::validate() const {
  (void)width();
  (void)height();
}

std::int64_t GridConfig::cell_of(double x, double y) const {
  if (!(x >= x_min && x < x_max && y >= y_min && y < y_max)) return -1;
  const int W = width(), H = height();
  const auto c = std::min(W - 1, static_cast<int>(std::floor((x - x_min) / cell)));
  const auto r = std::min(H - 1, static_cast<int>(std::floor((y - y_min) / cell)));
  return static_cast<std::int64_t>(r) * W + c;
}

Vec2 GridConfig::cell_center(std::int64_t idx) const {
  const int W = width();
  const auto r = idx / W, c = idx % W;
  return {x_min + (static_cast<double>(c) + 0.5) * cell, y_min + (static_cast<double>(r) + 0.5) * cell};
}

PillarInput pillarize(std::span<const LidarPoint> points, const GridConfig& grid, std::int64_t n_max) {
  if (n_max < 1) throw std::invalid_argument("pillarize: n_max must be positive");
  std::vector<const LidarPoint*> kept;
  std::vector<std::int64_t> kept_cell;
  for (const auto& p : points) {
    if (static_cast<std::int64_t>(kept.size()) == n_max) break;
    const auto cell = grid.cell_of(p.x, p.y);
    if (cell < 0) continue;
    kept.push_back(&p);
    kept_cell.push_back(cell);
  }
  // per-cell point mean, for the pillar-relative offsets
  std::vector<double> sx(static_cast<std::size_t>(grid.cells()), 0.0), sy(sx.size(), 0.0), n(sx.size(), 0.0);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto c = static_cast<std::size_t>(kept_cell[i]);
    sx[c] += kept[i]->x;
    sy[c] += kept[i]->y;
    n[c] += 1.0;
  }
  std::vector<double> feats(static_cast<std::size_t>(n_max * kPointFeatures), 0.0);
  std::vector<double> cells(static_cast<std::size_t>(n_max), -1.0);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto& p = *kept[i];
    const auto cell = kept_cell[i];
    const auto ci = static_cast<std::size_t>(cell);
    const Vec2 c = grid.cell_center(cell);
    double* f = feats.data() + i * kPointFeatures;
    f[0] = (p.x - c.x) / grid.cell;
    f[1] = (p.y - c.y) / grid.cell;
    f[2] = p.intensity;
    f[3] = (p.x - sx[ci] / n[ci]) / grid.cell;
    f[4] = (p.y - sy[ci] / n[ci]) / grid.cell;
    cells[i] = static_cast<double>(cell);
  }
  return {ad::Tensor({n_max, kPointFeatures}, std::move(feats)), ad::Tensor({n_max}, std::move(cells))};
}

std::vector<int> occupancy(const PillarInput& input, const GridConfig& grid) {
  std::vector<int> occ(static_cast<std::size_t>(grid.cells()), 0);
  for (double c : input.cells.values()) {
    if (c >= 0) ++occ[static_cast<std::size_t>(c)];
  }
  return occ;
}

}  // namespace coperc::models
