#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <unistd.h>

#include "coperc/autodiff/ops.hpp"
#include "coperc/models/checkpoint.hpp"
#include "coperc/models/model.hpp"
#include "support/finite_diff.hpp"

using namespace coperc;
using namespace coperc::models;
using coperc::ad::Shape;
using coperc::ad::Tape;
using coperc::ad::Tensor;
using coperc::testing::gradient_check;
using coperc::testing::random_tensor;

namespace {

ModelConfig tiny_config(FusionKind fusion = FusionKind::kAttention) {
  ModelConfig c;
  c.grid = {-2.0, 2.0, -2.0, 2.0, 1.0};  // 4 x 4
  c.d = 3;
  c.fusion = fusion;
  c.max_points = 12;
  return c;
}

std::vector<LidarPoint> random_points(std::mt19937_64& rng, int n, const GridConfig& g) {
  std::uniform_real_distribution<double> ux(g.x_min + 0.01, g.x_max - 0.01), uy(g.y_min + 0.01, g.y_max - 0.01),
      ui(0.1, 1.0);
  std::vector<LidarPoint> pts;
  for (int i = 0; i < n; ++i) pts.push_back({ux(rng), uy(rng), ui(rng)});
  return pts;
}

// Param view built from an ordered tensor list so the FD oracle can perturb it.
ParamView as_view(const ModelParams& base, const std::vector<Tensor>& values) {
  ParamView v;
  std::size_t i = 0;
  for (const auto& [name, t] : base.entries()) v.emplace(name, values[i++]);
  return v;
}

// Random values for every parameter, biases included: zero-initialized biases
// would park pre-activations exactly on relu kinks.
std::vector<Tensor> param_list(const ModelParams& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> out;
  for (const auto& e : p.entries()) out.push_back(random_tensor(rng, e.second.shape(), -0.8, 0.8));
  return out;
}

// Random weighted sum of all outputs: a scalar probe for gradient checks.
Tensor probe(const Tensor& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(x, random_tensor(rng, x.shape())));
}

BevFeatureMap map_of(std::vector<double> v, Shape s) { return {Tensor(std::move(s), std::move(v))}; }

}  // namespace

TEST_CASE("grid geometry and pillarization") {
  GridConfig g;
  CHECK(g.width() == 44);
  CHECK(g.height() == 12);
  CHECK(g.cell_of(-28.16, -7.68) == 0);
  CHECK(g.cell_of(28.16, 0.0) == -1);
  CHECK(g.cell_of(0.1, 0.1) == 6 * 44 + 22);
  CHECK_THROWS_AS(GridConfig({0, 1, 0, 1, 0.3}).validate(), std::invalid_argument);

  const GridConfig t{-2.0, 2.0, -2.0, 2.0, 1.0};
  std::vector<LidarPoint> pts{{-1.5, -1.5, 0.5}, {-1.25, -1.75, 0.25}, {9.0, 9.0, 1.0}, {1.5, 1.5, 1.0}};
  auto in = pillarize(pts, t, 3);
  CHECK(in.features.shape() == Shape{3, kPointFeatures});
  CHECK(in.cells.values()[0] == 0);
  CHECK(in.cells.values()[1] == 0);
  CHECK(in.cells.values()[2] == 15);
  CHECK(in.features.values()[0] == doctest::Approx(0.0));      // at the cell center
  CHECK(in.features.values()[3] == doctest::Approx(-0.125));   // x minus cell mean -1.375
  auto trunc = pillarize(pts, t, 2);
  CHECK(occupancy(trunc, t)[15] == 0);
  auto empty = pillarize({}, t, 4);
  for (double c : empty.cells.values()) CHECK(c == -1.0);
}

TEST_CASE("encoder: empty cloud gives an all-zero map") {
  auto cfg = tiny_config();
  ModelParams params(cfg, 3);
  auto map = encode(pillarize({}, cfg.grid, cfg.max_points), params.view(nullptr), cfg);
  CHECK(map.grid.shape() == Shape{4, 4, 3});
  for (double v : map.grid.values()) CHECK(v == 0.0);
}

TEST_CASE("encoder: shifting all points by one cell shifts the pre-conv features by one cell") {
  auto cfg = tiny_config();
  ModelParams params(cfg, 5);
  std::mt19937_64 rng(9);
  auto pts = random_points(rng, 10, cfg.grid);
  std::vector<LidarPoint> kept, shifted;
  for (const auto& p : pts) {
    if (p.x < cfg.grid.x_max - cfg.grid.cell) {
      kept.push_back(p);
      shifted.push_back({p.x + cfg.grid.cell, p.y, p.intensity});
    }
  }
  REQUIRE(!kept.empty());
  const auto a = pillarize(kept, cfg.grid, cfg.max_points);
  const auto b = pillarize(shifted, cfg.grid, cfg.max_points);
  auto fa = pillar_features(std::span(&a, 1), params.view(nullptr), cfg);
  auto fb = pillar_features(std::span(&b, 1), params.view(nullptr), cfg);
  const int W = cfg.grid.width(), H = cfg.grid.height(), d = cfg.d;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      for (int k = 0; k < d; ++k) {
        const double va = fa.values()[(r * W + c) * d + k];
        const double vb = c + 1 < W ? fb.values()[(r * W + c + 1) * d + k] : 0.0;
        if (c + 1 < W) CHECK(va == doctest::Approx(vb).epsilon(1e-12));
        if (c == 0) CHECK(fb.values()[(r * W) * d + k] == 0.0);
      }
    }
  }
}

TEST_CASE("encoder batching: members encode exactly as they would alone") {
  auto cfg = tiny_config();
  ModelParams params(cfg, 11);
  std::mt19937_64 rng(4);
  std::vector<PillarInput> ins;
  for (int i = 0; i < 3; ++i) ins.push_back(pillarize(random_points(rng, 4 + 3 * i, cfg.grid), cfg.grid, cfg.max_points));
  auto batched = encode_batch(ins, params.view(nullptr), cfg);
  CHECK(batched.shape() == Shape{3, 4, 4, 3});
  for (int i = 0; i < 3; ++i) {
    auto alone = encode(ins[static_cast<std::size_t>(i)], params.view(nullptr), cfg);
    auto member = unstack(batched, i);
    CHECK(std::equal(alone.grid.values().begin(), alone.grid.values().end(), member.grid.values().begin()));
  }
}

TEST_CASE("encoder gradients match finite differences") {
  auto cfg = tiny_config();
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    ModelParams params(cfg, 100 + static_cast<std::uint64_t>(trial));
    std::mt19937_64 rng(static_cast<std::uint64_t>(trial));
    std::vector<PillarInput> ins{pillarize(random_points(rng, 9, cfg.grid), cfg.grid, cfg.max_points),
                                 pillarize(random_points(rng, 6, cfg.grid), cfg.grid, cfg.max_points)};
    auto f = [&](const std::vector<Tensor>& p) {
      return probe(encode_batch(ins, as_view(params, p), cfg), 77);
    };
    worst = std::max(worst, gradient_check(f, param_list(params, static_cast<std::uint64_t>(trial))));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("maxout fusion") {
  const Shape s{1, 1, 2};
  std::vector<BevFeatureMap> one{map_of({1, 5}, s)};
  CHECK(fuse_maxout(one).grid.values()[1] == 5.0);
  std::vector<BevFeatureMap> two{map_of({1, 5}, s), map_of({3, 2}, s)};
  auto f = fuse_maxout(two);
  CHECK(f.grid.values()[0] == 3.0);
  CHECK(f.grid.values()[1] == 5.0);
  CHECK_THROWS_AS(fuse_maxout(std::span<const BevFeatureMap>{}), FusionError);

  // tracked A never wins: no gradient reaches it
  Tape tape;
  Tensor a = tape.watch(Tensor(s, {1, 1}));
  tape.mark(a, "encoder_output");
  std::vector<BevFeatureMap> ab{{a}, map_of({3, 2}, s)};
  auto g = tape.backward(ad::sum(fuse_maxout(ab).grid));
  CHECK(tape.count_tracked("encoder_output", g).grad_entries == 0);
  const Tensor ga = g.of(a);
  for (double v : ga.values()) CHECK(v == 0.0);

  std::mt19937_64 rng(1);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> ins;
    for (int m = 0; m < 3; ++m) ins.push_back(ad::affine(coperc::testing::random_distinct(rng, {2, 3, 4}), 1.0, 0.013 * m));
    auto fn = [](const std::vector<Tensor>& in) {
      std::vector<BevFeatureMap> maps;
      for (const auto& t : in) maps.push_back({t});
      return probe(fuse_maxout(maps).grid, 5);
    };
    worst = std::max(worst, gradient_check(fn, ins));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("naive fusion") {
  const Shape s{1, 2, 1};
  std::vector<BevFeatureMap> maps{map_of({1, 2}, s), map_of({3, 4}, s)};
  std::vector<std::vector<std::uint8_t>> valid{{1, 0}, {0, 1}};
  Rng rng(0);
  auto f = fuse_naive(maps, valid, rng);
  CHECK(f.grid.values()[0] == 1.0);
  CHECK(f.grid.values()[1] == 4.0);
  std::vector<std::vector<std::uint8_t>> none{{0, 0}, {0, 0}};
  const auto zero = fuse_naive(maps, none, rng);
  for (double v : zero.grid.values()) CHECK(v == 0.0);

  std::mt19937_64 gen(2);
  std::vector<BevFeatureMap> big;
  for (int m = 0; m < 4; ++m) big.push_back({random_tensor(gen, {8, 8, 2})});
  std::vector<std::vector<std::uint8_t>> all(4, std::vector<std::uint8_t>(64, 1));
  Rng r1(42), r2(42);
  auto x1 = fuse_naive(big, all, r1), x2 = fuse_naive(big, all, r2);
  CHECK(std::equal(x1.grid.values().begin(), x1.grid.values().end(), x2.grid.values().begin()));

  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> ins;
    for (int m = 0; m < 3; ++m) ins.push_back(random_tensor(gen, {3, 3, 2}));
    std::vector<std::vector<std::uint8_t>> v(3, std::vector<std::uint8_t>(9));
    for (auto& mask : v) for (auto& b : mask) b = gen() % 2;
    auto fn = [&](const std::vector<Tensor>& in) {
      std::vector<BevFeatureMap> m;
      for (const auto& t : in) m.push_back({t});
      Rng fixed(static_cast<std::uint64_t>(trial));
      return probe(fuse_naive(m, v, fixed).grid, 6);
    };
    worst = std::max(worst, gradient_check(fn, ins));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("naive fusion picks tracked agents in proportion N_grad / M") {
  const int M = 5, hw = 16 * 16;
  const Shape s{16, 16, 1};
  std::vector<std::vector<std::uint8_t>> valid(M, std::vector<std::uint8_t>(hw, 1));
  for (int n_grad : {1, 2, 4}) {
    std::int64_t picked_tracked = 0, total = 0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      std::vector<BevFeatureMap> maps;
      for (int m = 0; m < M; ++m) maps.push_back({Tensor::full(s, static_cast<double>(m))});
      Rng rng(seed);
      const auto fused = fuse_naive(maps, valid, rng);
      for (double v : fused.grid.values()) {
        picked_tracked += v < n_grad;
        ++total;
      }
    }
    const double p = static_cast<double>(n_grad) / M;
    const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(total));
    CHECK(std::abs(static_cast<double>(picked_tracked) / static_cast<double>(total) - p) < 3 * sigma);
  }
}

TEST_CASE("attention fusion") {
  auto cfg = tiny_config();
  ModelParams params(cfg, 8);
  auto pv = params.view(nullptr);
  std::mt19937_64 rng(3);
  BevFeatureMap a{random_tensor(rng, {4, 4, 3})};

  // M=1: output is the V projection
  std::vector<BevFeatureMap> one{a};
  auto single = fuse_attention(one, 0, pv);
  auto vproj = ad::matmul(ad::reshape(a.grid, {16, 3}), pv.at("att.v"));
  for (std::size_t i = 0; i < 48; ++i) CHECK(single.grid.values()[i] == doctest::Approx(vproj.values()[i]).epsilon(1e-12));

  // identical agents blend to the same result as one agent
  std::vector<BevFeatureMap> same{a, a, a};
  auto tri = fuse_attention(same, 1, pv);
  for (std::size_t i = 0; i < 48; ++i) CHECK(tri.grid.values()[i] == doctest::Approx(single.grid.values()[i]).epsilon(1e-12));

  // K/V order does not matter when the query agent is the same
  BevFeatureMap b{random_tensor(rng, {4, 4, 3})}, c{random_tensor(rng, {4, 4, 3})};
  std::vector<BevFeatureMap> abc{a, b, c}, acb{a, c, b};
  auto x = fuse_attention(abc, 0, pv), y = fuse_attention(acb, 0, pv);
  for (std::size_t i = 0; i < 48; ++i) CHECK(x.grid.values()[i] == doctest::Approx(y.grid.values()[i]).epsilon(1e-12));

  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> ins;
    for (int m = 0; m < 3; ++m) ins.push_back(random_tensor(rng, {2, 3, 3}));
    for (const char* n : {"att.q", "att.k", "att.v"}) ins.push_back(random_tensor(rng, {3, 3}));
    auto fn = [](const std::vector<Tensor>& in) {
      std::vector<BevFeatureMap> maps{{in[0]}, {in[1]}, {in[2]}};
      ParamView p{{"att.q", in[3]}, {"att.k", in[4]}, {"att.v", in[5]}};
      return probe(fuse_attention(maps, 1, p).grid, 12);
    };
    worst = std::max(worst, gradient_check(fn, ins));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("gradient-count law on the tape: attention N_grad*h*w*d, maxout and naive <= h*w*d") {
  const int M = 5, h = 16, w = 16, d = 8;
  const std::int64_t slots = static_cast<std::int64_t>(h) * w * d;
  ModelConfig cfg;
  cfg.grid = {-8.0, 8.0, -8.0, 8.0, 1.0};
  cfg.d = d;
  ModelParams params(cfg, 1);
  std::mt19937_64 rng(17);
  std::vector<Tensor> raw;
  for (int m = 0; m < M; ++m) raw.push_back(random_tensor(rng, {h, w, d}, 0.0, 1.0));

  for (int n_grad : {1, 2, 5}) {
    for (auto kind : {FusionKind::kAttention, FusionKind::kMaxout, FusionKind::kNaive}) {
      Tape tape;
      auto pv = params.view(&tape);
      std::vector<BevFeatureMap> maps;
      for (int m = 0; m < M; ++m) {
        if (m < n_grad) {
          Tensor t = tape.watch(raw[static_cast<std::size_t>(m)]);
          tape.mark(t, "encoder_output");
          maps.push_back({t});
        } else {
          maps.push_back({raw[static_cast<std::size_t>(m)]});
        }
      }
      BevFeatureMap fused;
      Rng r(5);
      std::vector<std::vector<std::uint8_t>> valid;
      for (const auto& m : maps) valid.push_back(nonzero_cells(m));
      if (kind == FusionKind::kAttention) fused = fuse_attention(maps, 0, pv);
      if (kind == FusionKind::kMaxout) fused = fuse_maxout(maps);
      if (kind == FusionKind::kNaive) fused = fuse_naive(maps, valid, r);
      auto grads = tape.backward(probe(fused.grid, 3));
      const auto counted = tape.count_tracked("encoder_output", grads).grad_entries;
      INFO("fusion " << to_string(kind) << " n_grad " << n_grad);
      if (kind == FusionKind::kAttention) CHECK(counted == n_grad * slots);
      else CHECK(counted <= slots);
    }
  }
}

TEST_CASE("head: zero map with zero bias scores 0.5 everywhere; gradients match") {
  auto cfg = tiny_config();
  cfg.cls_bias_init = 0.0;
  ModelParams params(cfg, 2);
  auto out = detect_head({Tensor::zeros({4, 4, 3})}, params.view(nullptr), cfg);
  for (double s : out.scores()) CHECK(s == 0.5);

  std::mt19937_64 rng(8);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    ModelParams p(cfg, 50 + static_cast<std::uint64_t>(trial));
    Tensor fused = random_tensor(rng, {4, 4, 3});
    std::vector<Tensor> ins = param_list(p, static_cast<std::uint64_t>(trial));
    ins.push_back(fused);
    auto fn = [&](const std::vector<Tensor>& in) {
      std::vector<Tensor> ps(in.begin(), in.end() - 1);
      auto o = detect_head({in.back()}, as_view(p, ps), cfg);
      return ad::add(probe(o.logits, 1), probe(o.reg, 2));
    };
    worst = std::max(worst, gradient_check(fn, ins));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("box encode/decode round-trip") {
  GridConfig g;
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> ux(g.x_min, g.x_max - 1e-6), uy(g.y_min, g.y_max - 1e-6), ul(1.0, 6.0),
      uyaw(-3.1, 3.1);
  for (int i = 0; i < 200; ++i) {
    ObjectBox b;
    b.center = {ux(rng), uy(rng)};
    b.length = ul(rng);
    b.width = ul(rng) / 2;
    b.yaw = uyaw(rng);
    auto t = encode_box(b, g);
    REQUIRE(t.cell >= 0);
    auto back = decode_cell(t.cell, t.reg, g);
    CHECK(back.center.x == doctest::Approx(b.center.x).epsilon(1e-12));
    CHECK(back.center.y == doctest::Approx(b.center.y).epsilon(1e-12));
    CHECK(back.length == doctest::Approx(b.length).epsilon(1e-12));
    CHECK(back.width == doctest::Approx(b.width).epsilon(1e-12));
    CHECK(back.yaw == doctest::Approx(b.yaw).epsilon(1e-12));
  }
}

TEST_CASE("detection loss") {
  auto cfg = tiny_config();
  const GridConfig& g = cfg.grid;
  ObjectBox box;
  box.center = {0.3, -0.6};
  box.length = 1.8;
  box.width = 0.9;
  box.yaw = 0.4;
  const std::vector<ObjectBox> gt{box};
  auto t = build_targets(gt, g);
  REQUIRE(t.pos_cells.size() == 1);
  CHECK(t.heat[static_cast<std::size_t>(t.pos_cells[0])] == 1.0);

  // perfect regression at the center cell: zero regression term
  std::vector<double> reg(16 * kRegChannels, 0.0);
  std::copy(t.reg.begin(), t.reg.end(), reg.begin() + t.pos_cells[0] * kRegChannels);
  DetectionOutput out{Tensor::zeros({16}), Tensor({16, kRegChannels}, reg), 4, 4};
  auto parts = detection_loss(out, gt, g);
  CHECK(parts.reg == 0.0);

  auto bg = detection_loss(out, {}, g);
  CHECK(std::isfinite(bg.total.item()));
  CHECK(bg.reg == 0.0);

  std::mt19937_64 rng(21);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> ins{random_tensor(rng, {16}, -3, 3), random_tensor(rng, {16, kRegChannels})};
    auto fn = [&](const std::vector<Tensor>& in) {
      return detection_loss({in[0], in[1], 4, 4}, gt, g).total;
    };
    worst = std::max(worst, gradient_check(fn, ins));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("decode keeps thresholded local maxima, best first") {
  GridConfig g{-2.0, 2.0, -2.0, 2.0, 1.0};
  std::vector<double> logits(16, -5.0);
  logits[5] = 2.0;   // peak
  logits[6] = 1.0;   // neighbor of the peak, suppressed
  logits[15] = 0.5;  // separate peak
  DetectionOutput out{Tensor({16}, logits), Tensor::zeros({16, kRegChannels}), 4, 4};
  auto boxes = decode(out, g, 0.3);
  REQUIRE(boxes.size() == 2);
  CHECK(boxes[0].score > boxes[1].score);
  CHECK(boxes[0].box.center.x == doctest::Approx(g.cell_center(5).x));
  CHECK(decode(out, g, 0.85).size() == 1);
}

TEST_CASE("checkpoint round-trip and validation") {
  const auto dir = std::filesystem::temp_directory_path() / ("coperc_ckpt_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  auto cfg = tiny_config();
  ModelParams params(cfg, 99);
  save_checkpoint(dir / "m.ckpt", params);
  auto back = load_checkpoint(dir / "m.ckpt", cfg);
  REQUIRE(back.entries().size() == params.entries().size());
  for (std::size_t i = 0; i < params.entries().size(); ++i) {
    const auto& a = params.entries()[i].second.values();
    const auto& b = back.entries()[i].second.values();
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(b[k] == static_cast<double>(static_cast<float>(a[k])));
  }
  CHECK(params.count() == back.count());

  auto other = cfg;
  other.fusion = FusionKind::kMaxout;
  CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", other), CheckpointError);

  {
    std::ifstream is(dir / "m.ckpt", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(is)), {});
    std::ofstream os(dir / "cut.ckpt", std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 3));
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt", cfg), CheckpointError);
  std::filesystem::remove_all(dir);
}
