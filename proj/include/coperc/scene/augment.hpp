#pragma once

#include <numbers>
#include <span>
#include <vector>

#include "coperc/rng.hpp"
#include "coperc/scene/geometry.hpp"

namespace coperc {

struct AugmentConfig {
  bool enabled = true;
  double max_rotation = std::numbers::pi / 2.0;  // +-90 degrees about z
  bool flip = true;
  double scale_min = 0.95;
  double scale_max = 1.05;
};

/// One frame-level draw, shared by every CAV cloud and box of the frame.
/// Applied as: flips, then rotation, then scaling.
struct AugParams {
  double rotation = 0.0;
  bool flip_x = false;  // reflect across the x-axis: y -> -y
  bool flip_y = false;  // reflect across the y-axis: x -> -x
  double scale = 1.0;

  Vec2 apply(Vec2 p) const;
  LidarPoint apply(const LidarPoint& p) const;
  ObjectBox apply(const ObjectBox& b) const;
  PointCloud apply(const PointCloud& c) const;
};

AugParams draw_augmentation(Rng& rng, const AugmentConfig& config);

/// Clouds and annotation boxes of one frame, all in the ego frame.
struct EgoFrame {
  std::vector<PointCloud> clouds;
  std::vector<ObjectBox> boxes;
};

EgoFrame augment(EgoFrame frame, const AugParams& params);
EgoFrame augment(EgoFrame frame, Rng& rng, const AugmentConfig& config);

/// Keeps boxes containing at least `min_points` points from the given clouds.
std::vector<ObjectBox> filter_sparse_boxes(std::span<const ObjectBox> boxes, std::span<const PointCloud> clouds,
                                           int min_points = 2);
EgoFrame filter_sparse_boxes(EgoFrame frame, int min_points = 2);

}  // namespace coperc
