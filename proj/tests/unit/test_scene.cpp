#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "coperc/rng.hpp"
#include "coperc/scene/augment.hpp"
#include "coperc/scene/scene.hpp"

using namespace coperc;

namespace {

// Independent ray-casting oracle: solves each ray/edge intersection as a 2x2
// linear system and returns, per ray, the id of the first box hit (or -1).
std::vector<int> oracle_first_hits(const Pose& sensor, const std::vector<ObjectBox>& boxes, int skip_id, int n_rays,
                                   double max_range, double inset) {
  std::vector<int> hits(static_cast<std::size_t>(n_rays), -1);
  for (int i = 0; i < n_rays; ++i) {
    const double ang = sensor.yaw - std::numbers::pi + 2.0 * std::numbers::pi * i / n_rays;
    const double dx = std::cos(ang), dy = std::sin(ang);
    double best = max_range;
    for (const auto& b : boxes) {
      if (b.id == skip_id) continue;
      ObjectBox body = b;
      body.length -= 2 * inset;
      body.width -= 2 * inset;
      auto c = body.corners();
      for (int e = 0; e < 4; ++e) {
        const Vec2 p = c[static_cast<std::size_t>(e)], q = c[static_cast<std::size_t>((e + 1) % 4)];
        // sensor + t*d = p + u*(q-p)  ->  [dx  -(qx-px); dy -(qy-py)] [t u]^T = p - sensor
        const double a11 = dx, a12 = -(q.x - p.x), a21 = dy, a22 = -(q.y - p.y);
        const double det = a11 * a22 - a12 * a21;
        if (std::abs(det) < 1e-14) continue;
        const double rx = p.x - sensor.x, ry = p.y - sensor.y;
        const double t = (rx * a22 - a12 * ry) / det;
        const double u = (a11 * ry - a21 * rx) / det;
        if (t > 1e-9 && u >= 0 && u <= 1 && t < best) {
          best = t;
          hits[static_cast<std::size_t>(i)] = b.id;
        }
      }
    }
  }
  return hits;
}

int count_hits(const std::vector<int>& hits, int id) { return static_cast<int>(std::count(hits.begin(), hits.end(), id)); }

}  // namespace

TEST_CASE("pose algebra") {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    Pose p{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-3.1, 3.1)};
    Pose id = p.compose(p.inverse());
    CHECK(std::abs(id.x) < 1e-9);
    CHECK(std::abs(id.y) < 1e-9);
    CHECK(std::abs(id.yaw) < 1e-9);
    Vec2 a{rng.uniform(-10, 10), rng.uniform(-10, 10)}, b{rng.uniform(-10, 10), rng.uniform(-10, 10)};
    CHECK(std::abs(norm(p.to_parent(a) - p.to_parent(b)) - norm(a - b)) < 1e-9);
  }
  CHECK(wrap_angle(std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(wrap_angle(-std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(wrap_angle(3 * std::numbers::pi / 2) == doctest::Approx(-std::numbers::pi / 2));
}

TEST_CASE("transform_to_ego") {
  PointCloud c;
  c.points = {{1, 1, 0.5}};
  auto same = transform_to_ego(c, c.frame_pose);
  CHECK(same.points[0].x == 1);
  CHECK(same.points[0].y == 1);

  auto shifted = transform_to_ego(c, Pose{5, 0, 0});
  CHECK(shifted.points[0].x == doctest::Approx(-4));
  CHECK(shifted.points[0].y == doctest::Approx(1));
  CHECK(shifted.points[0].intensity == 0.5);

  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    PointCloud raw;
    raw.frame_pose = {rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-3, 3)};
    for (int k = 0; k < 10; ++k) raw.points.push_back({rng.uniform(-9, 9), rng.uniform(-9, 9), 0.1});
    Pose ego{rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-3, 3)};
    auto back = transform_to_ego(transform_to_ego(raw, ego), raw.frame_pose);
    for (std::size_t k = 0; k < raw.points.size(); ++k) {
      CHECK(std::abs(back.points[k].x - raw.points[k].x) < 1e-9);
      CHECK(std::abs(back.points[k].y - raw.points[k].y) < 1e-9);
    }
  }
}

TEST_CASE("generate_scenario basics") {
  ScenarioConfig cfg;
  cfg.n_cavs = 1;
  auto single = generate_scenario(0, cfg);
  CHECK(single.cavs.size() == 1);
  CHECK(single.ego == 1);

  cfg.n_cavs = 3;
  auto a = generate_scenario(0, cfg);
  auto b = generate_scenario(0, cfg);
  REQUIRE(a.frames() == b.frames());
  for (int f = 0; f < a.frames(); ++f) {
    const auto& oa = a.objects[static_cast<std::size_t>(f)];
    const auto& ob = b.objects[static_cast<std::size_t>(f)];
    REQUIRE(oa.size() == ob.size());
    for (std::size_t i = 0; i < oa.size(); ++i) {
      CHECK(oa[i].center == ob[i].center);
      CHECK(oa[i].yaw == ob[i].yaw);
    }
  }
  // No two CAVs share a pose.
  for (int f = 0; f < a.frames(); ++f) {
    for (std::size_t i = 0; i < a.cavs.size(); ++i) {
      for (std::size_t j = i + 1; j < a.cavs.size(); ++j) {
        CHECK(distance(a.cavs[i].poses[static_cast<std::size_t>(f)], a.cavs[j].poses[static_cast<std::size_t>(f)]) > 1.0);
      }
    }
  }

  cfg.n_cavs = 0;
  CHECK_THROWS_AS(generate_scenario(0, cfg), ScenarioError);
  cfg.n_cavs = 8;
  CHECK_THROWS_AS(generate_scenario(0, cfg), ScenarioError);
}

TEST_CASE("occlusion property holds on >= 80% of frames (ray-cast oracle)") {
  ScenarioConfig cfg;
  int frames = 0, hidden = 0, reduced = 0;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    auto s = generate_scenario(seed, cfg);
    for (int f = 0; f < s.frames(); ++f) {
      ++frames;
      const Pose ego = s.cav_pose(f, s.ego);
      const auto& boxes = s.objects[static_cast<std::size_t>(f)];
      auto ego_hits = oracle_first_hits(ego, boxes, s.ego, cfg.lidar.n_rays, cfg.lidar.max_range,
                                        cfg.lidar.surface_inset);
      std::vector<std::vector<int>> nbr_hits;
      for (const auto& c : s.cavs) {
        if (c.id == s.ego) continue;
        const Pose p = c.poses[static_cast<std::size_t>(f)];
        if (distance(p, ego) >= cfg.comm_range) continue;
        nbr_hits.push_back(oracle_first_hits(p, boxes, c.id, cfg.lidar.n_rays, cfg.lidar.max_range,
                                             cfg.lidar.surface_inset));
      }
      int ego_visible = 0, fused_visible = 0;
      bool has_hidden = false;
      for (const auto& b : boxes) {
        if (b.id == s.ego) continue;
        const Vec2 l = ego.to_local(b.center);
        if (std::abs(l.x) > cfg.detection_half_extent.x || std::abs(l.y) > cfg.detection_half_extent.y) continue;
        const int e = count_hits(ego_hits, b.id);
        int fused = e;
        for (const auto& h : nbr_hits) fused += count_hits(h, b.id);
        ego_visible += e >= 2;
        fused_visible += fused >= 2;
        has_hidden |= e < 2 && fused >= 2;
      }
      hidden += has_hidden;
      reduced += ego_visible < fused_visible;
    }
  }
  CHECK(hidden >= 0.8 * frames);
  CHECK(reduced >= 0.8 * frames);
}

TEST_CASE("simulate_lidar geometry") {
  LidarConfig lc;
  lc.n_rays = 360;
  lc.noise_sigma = 0.0;
  lc.surface_inset = 0.0;
  lc.max_range = 60.0;
  MapExtent ext;

  SUBCASE("single 4 m wide object at 10 m matches subtended-angle count") {
    ObjectBox box{{10.0, 0.0}, 2.0, 4.0, 0.0, 7};
    auto cloud = cast_rays(Pose{}, std::vector<ObjectBox>{box}, std::nullopt, ext, lc, std::nullopt);
    double lo = 1e9, hi = -1e9;
    for (auto c : box.corners()) {
      lo = std::min(lo, std::atan2(c.y, c.x));
      hi = std::max(hi, std::atan2(c.y, c.x));
    }
    int expected = 0;
    for (int i = 0; i < lc.n_rays; ++i) {
      const double a = -std::numbers::pi + 2.0 * std::numbers::pi * i / lc.n_rays;
      expected += a >= lo && a <= hi;
    }
    CHECK(points_in_box(box, cloud.points) == expected);
    CHECK(expected > 0);
  }

  SUBCASE("occluded object receives no points") {
    ObjectBox front{{6.0, 0.0}, 2.0, 4.0, 0.0, 1};
    ObjectBox behind{{15.0, 0.0}, 2.0, 2.0, 0.0, 2};
    auto cloud = cast_rays(Pose{}, std::vector<ObjectBox>{front, behind}, std::nullopt, ext, lc, std::nullopt);
    CHECK(points_in_box(behind, cloud.points) == 0);
    CHECK(points_in_box(front, cloud.points) > 0);
  }

  SUBCASE("density decreases with distance") {
    ObjectBox near{{2.5, 0.0}, 1.0, 1.8, 0.0, 1};
    ObjectBox far{{50.0, 0.0}, 1.0, 1.8, 0.0, 1};
    auto cn = cast_rays(Pose{}, std::vector<ObjectBox>{near}, std::nullopt, ext, lc, std::nullopt);
    auto cf = cast_rays(Pose{}, std::vector<ObjectBox>{far}, std::nullopt, ext, lc, std::nullopt);
    CHECK(points_in_box(far, cf.points) < points_in_box(near, cn.points));
  }

  SUBCASE("points stay within max range and simulation is deterministic") {
    ScenarioConfig cfg;
    auto s = generate_scenario(5, cfg);
    auto a = simulate_lidar(s, 0, 2, cfg.lidar);
    auto b = simulate_lidar(s, 0, 2, cfg.lidar);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a.points[i].x == b.points[i].x);
      CHECK(std::hypot(a.points[i].x, a.points[i].y) <= cfg.lidar.max_range);
    }
  }
}

TEST_CASE("augmentation") {
  SUBCASE("identity draw") {
    AugParams id;
    ObjectBox b{{3, 4}, 4, 2, 0.3, 1};
    auto out = id.apply(b);
    CHECK(out.center == b.center);
    CHECK(out.yaw == doctest::Approx(0.3));
  }
  SUBCASE("flip across x-axis") {
    AugParams p;
    p.flip_x = true;
    auto q = p.apply(Vec2{1, 2});
    CHECK(q.x == doctest::Approx(1));
    CHECK(q.y == doctest::Approx(-2));
    CHECK(p.apply(ObjectBox{{0, 0}, 4, 2, 0.7, 1}).yaw == doctest::Approx(-0.7));
  }
  SUBCASE("membership is preserved for every draw") {
    ScenarioConfig cfg;
    auto s = generate_scenario(9, cfg);
    const Pose ego = s.cav_pose(0, s.ego);
    EgoFrame frame;
    for (const auto& c : s.cavs) frame.clouds.push_back(transform_to_ego(simulate_lidar(s, 0, c.id, cfg.lidar), ego));
    for (const auto& b : s.objects[0]) frame.boxes.push_back(b.to_local(ego));
    Rng rng(99);
    AugmentConfig ac;
    for (int trial = 0; trial < 25; ++trial) {
      auto aug = augment(frame, rng, ac);
      for (std::size_t i = 0; i < frame.boxes.size(); ++i) {
        for (std::size_t c = 0; c < frame.clouds.size(); ++c) {
          CHECK(points_in_box(frame.boxes[i], frame.clouds[c].points) ==
                points_in_box(aug.boxes[i], aug.clouds[c].points));
        }
        CHECK(aug.boxes[i].yaw > -std::numbers::pi);
        CHECK(aug.boxes[i].yaw <= std::numbers::pi);
      }
    }
  }
}

TEST_CASE("filter_sparse_boxes keeps boxes with at least two points") {
  ObjectBox empty{{0, 0}, 2, 2, 0, 1}, one{{10, 0}, 2, 2, 0, 2}, two{{20, 0}, 2, 2, 0, 3};
  PointCloud a, b;
  a.points = {{10, 0, 0}, {20, 0.5, 0}};
  b.points = {{20, -0.5, 0}};
  std::vector<PointCloud> clouds{a, b};
  auto kept = filter_sparse_boxes(std::vector<ObjectBox>{empty, one, two}, clouds);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].id == 3);
}
