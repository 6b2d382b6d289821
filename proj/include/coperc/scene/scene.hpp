#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "coperc/ids.hpp"
#include "coperc/scene/geometry.hpp"

namespace coperc {

/// Walled straight road centred on the world origin, running along x.
struct MapExtent {
  double half_length = 60.0;
  double half_width = 8.5;
};

struct LidarConfig {
  int n_rays = 720;
  double max_range = 30.0;
  double noise_sigma = 0.02;
  /// Vehicle bodies are this much smaller than their annotation boxes on
  /// every side, so surface returns land inside the annotated box.
  double surface_inset = 0.05;
};

struct ScenarioConfig {
  int n_cavs = 3;
  int n_objects = 12;
  int frames = 4;
  MapExtent extent;
  double frame_dt = 0.1;
  /// Communication range used to place cooperators around the ego.
  double comm_range = 14.0;
  /// Half extents of the ego-centred detection window (x, y).
  Vec2 detection_half_extent{28.16, 7.68};
  LidarConfig lidar;
  int max_attempts = 200;
};

struct CavTrajectory {
  CavId id = 0;
  std::vector<Pose> poses;  // one per frame, world frame
};

struct Scenario {
  std::uint64_t seed = 0;
  ScenarioConfig config;
  CavId ego = 1;
  std::vector<CavTrajectory> cavs;
  /// Every vehicle per frame in world coordinates, CAV bodies included
  /// (their box id equals the CAV id).
  std::vector<std::vector<ObjectBox>> objects;

  int frames() const { return static_cast<int>(objects.size()); }
  const CavTrajectory& cav(CavId id) const;
  Pose cav_pose(int frame, CavId id) const;
  double timestamp(int frame) const { return frame * config.frame_dt; }
};

class ScenarioError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Deterministic procedural road scene. Retries layouts until every frame has
/// at least one in-range object the ego cannot see (< 2 returns) but the
/// fused cooperators can (>= 2 returns), up to `max_attempts`.
Scenario generate_scenario(std::uint64_t seed, const ScenarioConfig& config);

/// Raw scan of one CAV, in its sensor frame. Range noise is seeded from
/// (scenario seed, frame, cav id).
PointCloud simulate_lidar(const Scenario& scenario, int frame, CavId cav, const LidarConfig& config);

/// Ray casting against explicit obstacles; `skip_id` excludes the sensor's
/// own body. `noise_seed` empty means noiseless.
PointCloud cast_rays(const Pose& sensor, std::span<const ObjectBox> obstacles, std::optional<int> skip_id,
                     const MapExtent& extent, const LidarConfig& config, std::optional<std::uint64_t> noise_seed);

/// Count of points inside `box` (points and box in the same frame).
int points_in_box(const ObjectBox& box, std::span<const LidarPoint> points);

/// True when the ego frame at `frame` has an object hidden from the ego but
/// seen by the fused cooperators (see generate_scenario).
bool frame_has_hidden_object(const Scenario& scenario, int frame);

}  // namespace coperc
