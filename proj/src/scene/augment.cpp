#include "coperc/scene/augment.hpp"

#include <cmath>
#include <numbers>

#include "coperc/scene/scene.hpp"

namespace coperc {

Vec2 AugParams::apply(Vec2 p) const {
  if (flip_x) p.y = -p.y;
  if (flip_y) p.x = -p.x;
  const double c = std::cos(rotation), s = std::sin(rotation);
  return {scale * (c * p.x - s * p.y), scale * (s * p.x + c * p.y)};
}

LidarPoint AugParams::apply(const LidarPoint& p) const {
  const Vec2 q = apply(Vec2{p.x, p.y});
  return {q.x, q.y, p.intensity};
}

ObjectBox AugParams::apply(const ObjectBox& b) const {
  ObjectBox out = b;
  out.center = apply(b.center);
  double yaw = b.yaw;
  if (flip_x) yaw = -yaw;
  if (flip_y) yaw = std::numbers::pi - yaw;
  out.yaw = wrap_angle(yaw + rotation);
  out.length = b.length * scale;
  out.width = b.width * scale;
  return out;
}

PointCloud AugParams::apply(const PointCloud& c) const {
  PointCloud out;
  out.frame_pose = c.frame_pose;
  out.max_range = c.max_range * scale;
  out.sensor_origin = apply(c.sensor_origin);
  out.points.reserve(c.points.size());
  for (const auto& p : c.points) out.points.push_back(apply(p));
  return out;
}

AugParams draw_augmentation(Rng& rng, const AugmentConfig& config) {
  AugParams p;
  if (!config.enabled) return p;
  p.rotation = rng.uniform(-config.max_rotation, config.max_rotation);
  if (config.flip) {
    p.flip_x = rng.coin();
    p.flip_y = rng.coin();
  }
  p.scale = rng.uniform(config.scale_min, config.scale_max);
  return p;
}

EgoFrame augment(EgoFrame frame, const AugParams& params) {
  for (auto& c : frame.clouds) c = params.apply(c);
  for (auto& b : frame.boxes) b = params.apply(b);
  return frame;
}

EgoFrame augment(EgoFrame frame, Rng& rng, const AugmentConfig& config) {
  return augment(std::move(frame), draw_augmentation(rng, config));
}

std::vector<ObjectBox> filter_sparse_boxes(std::span<const ObjectBox> boxes, std::span<const PointCloud> clouds,
                                           int min_points) {
  std::vector<ObjectBox> kept;
  for (const auto& b : boxes) {
    int n = 0;
    for (const auto& c : clouds) n += points_in_box(b, c.points);
    if (n >= min_points) kept.push_back(b);
  }
  return kept;
}

EgoFrame filter_sparse_boxes(EgoFrame frame, int min_points) {
  frame.boxes = filter_sparse_boxes(frame.boxes, frame.clouds, min_points);
  return frame;
}

}  // namespace coperc
