#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

namespace coperc {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2, Vec2) = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  if (a <= -std::numbers::pi) a += two_pi;
  if (a > std::numbers::pi) a -= two_pi;
  return a;
}

/// SE(2) pose of a local frame expressed in a parent frame.
struct Pose {
  double x = 0.0;
  double y = 0.0;
  double yaw = 0.0;

  Vec2 position() const { return {x, y}; }

  /// Maps a point from this local frame into the parent frame.
  Vec2 to_parent(Vec2 p) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {c * p.x - s * p.y + x, s * p.x + c * p.y + y};
  }
  /// Maps a parent-frame point into this local frame.
  Vec2 to_local(Vec2 p) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double dx = p.x - x, dy = p.y - y;
    return {c * dx + s * dy, -s * dx + c * dy};
  }

  /// this ∘ other: `other` is expressed in this frame.
  Pose compose(const Pose& other) const {
    const Vec2 p = to_parent(other.position());
    return {p.x, p.y, wrap_angle(yaw + other.yaw)};
  }
  Pose inverse() const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {-(c * x + s * y), -(-s * x + c * y), wrap_angle(-yaw)};
  }

  friend bool operator==(const Pose&, const Pose&) = default;
};

inline double distance(const Pose& a, const Pose& b) { return norm(a.position() - b.position()); }

/// Oriented 2D bounding box. `length` runs along the heading.
struct ObjectBox {
  Vec2 center;
  double length = 4.0;
  double width = 1.8;
  double yaw = 0.0;
  int id = 0;

  /// Counter-clockwise corners starting at front-left.
  std::array<Vec2, 4> corners() const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double hl = 0.5 * length, hw = 0.5 * width;
    const std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
    std::array<Vec2, 4> out{};
    for (std::size_t i = 0; i < 4; ++i) {
      out[i] = {center.x + c * local[i].x - s * local[i].y, center.y + s * local[i].x + c * local[i].y};
    }
    return out;
  }

  bool contains(Vec2 p, double margin = 0.0) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double dx = p.x - center.x, dy = p.y - center.y;
    const double u = c * dx + s * dy, v = -s * dx + c * dy;
    return std::abs(u) <= 0.5 * length + margin && std::abs(v) <= 0.5 * width + margin;
  }

  double area() const { return length * width; }

  /// Re-expresses a box given in `from`'s local frame inside `from`'s parent.
  ObjectBox to_parent(const Pose& from) const {
    ObjectBox b = *this;
    b.center = from.to_parent(center);
    b.yaw = wrap_angle(yaw + from.yaw);
    return b;
  }
  ObjectBox to_local(const Pose& frame) const {
    ObjectBox b = *this;
    b.center = frame.to_local(center);
    b.yaw = wrap_angle(yaw - frame.yaw);
    return b;
  }
};

struct LidarPoint {
  double x = 0.0;
  double y = 0.0;
  double intensity = 0.0;
};

/// A 2D scan. `frame_pose` is the world pose of the frame the points are
/// expressed in: the sensor pose for raw scans, the ego pose after
/// transform_to_ego. `sensor_origin` is the sensor position in that frame.
struct PointCloud {
  std::vector<LidarPoint> points;
  Pose frame_pose;
  Vec2 sensor_origin;
  double max_range = 0.0;

  std::size_t size() const { return points.size(); }
};

/// Rigid SE(2) re-expression of `cloud` in the frame whose world pose is
/// `ego_pose`. Intensities are unchanged; applying it again with the original
/// frame pose inverts it.
PointCloud transform_to_ego(const PointCloud& cloud, const Pose& ego_pose);

}  // namespace coperc
