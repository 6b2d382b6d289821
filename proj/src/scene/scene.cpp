#include "coperc/scene/scene.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "coperc/rng.hpp"

namespace coperc {

PointCloud transform_to_ego(const PointCloud& cloud, const Pose& ego_pose) {
  PointCloud out;
  out.frame_pose = ego_pose;
  out.max_range = cloud.max_range;
  out.sensor_origin = ego_pose.to_local(cloud.frame_pose.to_parent(cloud.sensor_origin));
  out.points.reserve(cloud.points.size());
  for (const auto& p : cloud.points) {
    const Vec2 q = ego_pose.to_local(cloud.frame_pose.to_parent({p.x, p.y}));
    out.points.push_back({q.x, q.y, p.intensity});
  }
  return out;
}

const CavTrajectory& Scenario::cav(CavId id) const {
  for (const auto& c : cavs) {
    if (c.id == id) return c;
  }
  throw ScenarioError("no CAV with id " + std::to_string(id) + " in scenario " + std::to_string(seed));
}

Pose Scenario::cav_pose(int frame, CavId id) const {
  const auto& c = cav(id);
  if (frame < 0 || frame >= static_cast<int>(c.poses.size())) {
    throw ScenarioError("frame " + std::to_string(frame) + " out of range");
  }
  return c.poses[static_cast<std::size_t>(frame)];
}

int points_in_box(const ObjectBox& box, std::span<const LidarPoint> points) {
  int n = 0;
  for (const auto& p : points) n += box.contains({p.x, p.y}) ? 1 : 0;
  return n;
}

namespace {

struct Segment {
  Vec2 a, b;
  double intensity;
};

// Distance along the unit ray (o, d) to segment s, or +inf.
double ray_hit(Vec2 o, Vec2 d, const Segment& s) {
  const Vec2 e = s.b - s.a;
  const double denom = cross(d, e);
  if (std::abs(denom) < 1e-15) return std::numeric_limits<double>::infinity();
  const Vec2 ao = s.a - o;
  const double t = cross(ao, e) / denom;
  const double u = cross(ao, d) / denom;
  if (t <= 1e-9 || u < 0.0 || u > 1.0) return std::numeric_limits<double>::infinity();
  return t;
}

}  // namespace

PointCloud cast_rays(const Pose& sensor, std::span<const ObjectBox> obstacles, std::optional<int> skip_id,
                     const MapExtent& extent, const LidarConfig& config, std::optional<std::uint64_t> noise_seed) {
  std::vector<Segment> segments;
  segments.reserve(obstacles.size() * 4 + 4);
  for (const auto& box : obstacles) {
    if (skip_id && box.id == *skip_id) continue;
    ObjectBox body = box;
    body.length = std::max(1e-3, box.length - 2.0 * config.surface_inset);
    body.width = std::max(1e-3, box.width - 2.0 * config.surface_inset);
    const auto c = body.corners();
    for (std::size_t i = 0; i < 4; ++i) segments.push_back({c[i], c[(i + 1) % 4], 0.8});
  }
  const double L = extent.half_length, W = extent.half_width;
  const std::array<Vec2, 4> wall{{{L, W}, {-L, W}, {-L, -W}, {L, -W}}};
  for (std::size_t i = 0; i < 4; ++i) segments.push_back({wall[i], wall[(i + 1) % 4], 0.3});

  PointCloud cloud;
  cloud.frame_pose = sensor;
  cloud.max_range = config.max_range;
  std::optional<Rng> rng;
  if (noise_seed && config.noise_sigma > 0.0) rng.emplace(*noise_seed);

  const Vec2 origin = sensor.position();
  for (int i = 0; i < config.n_rays; ++i) {
    const double local_angle = -std::numbers::pi + 2.0 * std::numbers::pi * i / config.n_rays;
    const double world_angle = local_angle + sensor.yaw;
    const Vec2 dir{std::cos(world_angle), std::sin(world_angle)};
    double best = std::numeric_limits<double>::infinity();
    double intensity = 0.0;
    for (const auto& s : segments) {
      const double t = ray_hit(origin, dir, s);
      if (t < best) {
        best = t;
        intensity = s.intensity;
      }
    }
    // Draw noise for every ray so the stream does not depend on hit pattern.
    const double noise = rng ? config.noise_sigma * rng->normal() : 0.0;
    if (!std::isfinite(best)) continue;
    const double r = best + noise;
    if (r > config.max_range || r <= 0.0) continue;
    const double falloff = 1.0 - 0.5 * r / config.max_range;
    cloud.points.push_back({r * std::cos(local_angle), r * std::sin(local_angle), intensity * falloff});
  }
  return cloud;
}

PointCloud simulate_lidar(const Scenario& scenario, int frame, CavId cav, const LidarConfig& config) {
  const Pose sensor = scenario.cav_pose(frame, cav);
  const auto seed = Rng::derive(Rng::derive(scenario.seed, static_cast<std::uint64_t>(frame) + 1000),
                                static_cast<std::uint64_t>(cav));
  return cast_rays(sensor, scenario.objects[static_cast<std::size_t>(frame)], cav, scenario.config.extent, config,
                   seed);
}

bool frame_has_hidden_object(const Scenario& scenario, int frame) {
  const Pose ego = scenario.cav_pose(frame, scenario.ego);
  const auto& cfg = scenario.config;
  std::vector<PointCloud> world_clouds;
  PointCloud ego_world;
  for (const auto& c : scenario.cavs) {
    const Pose p = c.poses[static_cast<std::size_t>(frame)];
    if (c.id != scenario.ego && distance(p, ego) >= cfg.comm_range) continue;
    auto cloud = transform_to_ego(simulate_lidar(scenario, frame, c.id, cfg.lidar), Pose{});
    if (c.id == scenario.ego) ego_world = cloud;
    world_clouds.push_back(std::move(cloud));
  }
  for (const auto& box : scenario.objects[static_cast<std::size_t>(frame)]) {
    if (box.id == scenario.ego) continue;
    const Vec2 local = ego.to_local(box.center);
    if (std::abs(local.x) > cfg.detection_half_extent.x || std::abs(local.y) > cfg.detection_half_extent.y) continue;
    if (points_in_box(box, ego_world.points) >= 2) continue;
    int fused = 0;
    for (const auto& c : world_clouds) fused += points_in_box(box, c.points);
    if (fused >= 2) return true;
  }
  return false;
}

namespace {

constexpr std::array<double, 4> kDrivingLanes{-5.25, -1.75, 1.75, 5.25};
constexpr double kParkingOffset = 7.25;
constexpr double kMinGap = 1.5;

struct Vehicle {
  int id;
  double lane_y;
  double x0;
  double speed;  // signed along x
  double yaw;
  double length;
  double width;
};

bool overlaps(const Vehicle& a, const Vehicle& b, double horizon) {
  if (std::abs(a.lane_y - b.lane_y) > 1e-9) return false;
  const double gap = 0.5 * (a.length + b.length) + kMinGap;
  // Check both ends of the sequence; motion is linear.
  const double d0 = a.x0 - b.x0;
  const double d1 = d0 + (a.speed - b.speed) * horizon;
  return std::abs(d0) < gap || std::abs(d1) < gap || (d0 > 0) != (d1 > 0);
}

Vehicle sample_vehicle(Rng& rng, int id, double lane_y, double x0, double lane_speed) {
  Vehicle v{};
  v.id = id;
  v.lane_y = lane_y;
  v.x0 = x0;
  v.length = rng.uniform(3.9, 4.8);
  v.width = rng.uniform(1.7, 2.0);
  const bool parked = std::abs(lane_y) > 6.0;
  const double heading = lane_y < 0.0 ? 0.0 : std::numbers::pi;
  if (parked) {
    v.speed = 0.0;
    v.yaw = wrap_angle(heading + rng.uniform(-0.05, 0.05));
  } else {
    v.speed = (lane_y < 0.0 ? 1.0 : -1.0) * (lane_speed + rng.uniform(-0.3, 0.3));
    v.yaw = wrap_angle(heading + rng.uniform(-0.03, 0.03));
  }
  return v;
}

Scenario layout(Rng& rng, std::uint64_t seed, const ScenarioConfig& cfg) {
  const double horizon = (cfg.frames - 1) * cfg.frame_dt;
  std::array<double, 4> lane_speed{};
  for (auto& s : lane_speed) s = rng.uniform(7.0, 11.0);
  auto speed_for = [&](double lane_y) {
    for (std::size_t i = 0; i < kDrivingLanes.size(); ++i) {
      if (kDrivingLanes[i] == lane_y) return lane_speed[i];
    }
    return 0.0;
  };

  const double x_limit = cfg.extent.half_length - 12.0;
  std::vector<Vehicle> vehicles;
  auto fits = [&](const Vehicle& v) {
    if (std::abs(v.x0) > x_limit || std::abs(v.x0 + v.speed * horizon) > x_limit) return false;
    return std::none_of(vehicles.begin(), vehicles.end(), [&](const Vehicle& o) { return overlaps(v, o, horizon); });
  };

  const double ego_lane = kDrivingLanes[rng.below(kDrivingLanes.size())];
  vehicles.push_back(sample_vehicle(rng, 1, ego_lane, rng.uniform(-5.0, 5.0), speed_for(ego_lane)));
  const Vehicle ego = vehicles.front();

  for (int id = 2; id <= cfg.n_cavs; ++id) {
    for (int tries = 0; tries < 500; ++tries) {
      const double lane = kDrivingLanes[rng.below(kDrivingLanes.size())];
      const double along = (rng.coin() ? 1.0 : -1.0) * rng.uniform(4.0, 13.0);
      Vehicle v = sample_vehicle(rng, id, lane, ego.x0 + along, speed_for(lane));
      // Must stay in communication range for the whole sequence.
      const double d0 = std::hypot(v.x0 - ego.x0, v.lane_y - ego.lane_y);
      const double d1 =
          std::hypot(v.x0 + v.speed * horizon - ego.x0 - ego.speed * horizon, v.lane_y - ego.lane_y);
      if (std::max(d0, d1) >= cfg.comm_range - 0.5 || !fits(v)) continue;
      vehicles.push_back(v);
      break;
    }
    if (static_cast<int>(vehicles.size()) != id) {
      throw ScenarioError("could not place " + std::to_string(cfg.n_cavs) + " CAVs in range");
    }
  }

  for (int k = 0; k < cfg.n_objects; ++k) {
    for (int tries = 0; tries < 100; ++tries) {
      double lane;
      if (rng.coin(0.25)) {
        lane = rng.coin() ? kParkingOffset : -kParkingOffset;
      } else {
        lane = kDrivingLanes[rng.below(kDrivingLanes.size())];
      }
      Vehicle v = sample_vehicle(rng, 100 + k, lane, ego.x0 + rng.uniform(-32.0, 32.0), speed_for(lane));
      if (!fits(v)) continue;
      vehicles.push_back(v);
      break;
    }
  }

  Scenario s;
  s.seed = seed;
  s.config = cfg;
  s.ego = 1;
  s.objects.resize(static_cast<std::size_t>(cfg.frames));
  for (const auto& v : vehicles) {
    if (v.id <= cfg.n_cavs) s.cavs.push_back({v.id, {}});
  }
  for (int f = 0; f < cfg.frames; ++f) {
    const double t = f * cfg.frame_dt;
    for (const auto& v : vehicles) {
      ObjectBox b;
      b.center = {v.x0 + v.speed * t, v.lane_y};
      b.length = v.length;
      b.width = v.width;
      b.yaw = v.yaw;
      b.id = v.id;
      s.objects[static_cast<std::size_t>(f)].push_back(b);
      if (v.id <= cfg.n_cavs) {
        s.cavs[static_cast<std::size_t>(v.id - 1)].poses.push_back({b.center.x, b.center.y, v.yaw});
      }
    }
  }
  return s;
}

}  // namespace

Scenario generate_scenario(std::uint64_t seed, const ScenarioConfig& config) {
  if (config.n_cavs < 1) throw ScenarioError("n_cavs must be at least 1");
  if (config.n_cavs > 7) throw ScenarioError("n_cavs must be at most 7 (maximum cooperators)");
  if (config.frames < 1) throw ScenarioError("frames must be at least 1");
  if (config.n_objects < 0) throw ScenarioError("n_objects must be non-negative");
  if (config.extent.half_width < 8.3 || config.extent.half_length < 40.0) {
    throw ScenarioError("map extent too small for the road layout");
  }

  Rng rng(seed);
  if (config.n_cavs == 1) return layout(rng, seed, config);

  std::optional<Scenario> best;
  int best_score = -1;
  for (int attempt = 0; attempt < std::max(1, config.max_attempts); ++attempt) {
    Scenario s = layout(rng, seed, config);
    int score = 0;
    for (int f = 0; f < s.frames(); ++f) score += frame_has_hidden_object(s, f) ? 1 : 0;
    if (score == s.frames()) return s;
    if (score > best_score) {
      best_score = score;
      best = std::move(s);
    }
  }
  return *best;
}

}  // namespace coperc
