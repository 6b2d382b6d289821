#pragma once

// Exhaustive AP oracle for tiny cases. Enumerates every injective assignment
// of predictions to ground truth and keeps the one that is lexicographically
// best in rank order (highest-ranked prediction first, larger IoU preferred),
// which is the assignment greedy matching by score is meant to produce.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "coperc/train/eval.hpp"

namespace coperc::testing {

struct MicroCase {
  std::vector<models::ScoredBox> predictions;  // distinct scores
  std::vector<ObjectBox> gt;
};

inline double brute_force_ap(const MicroCase& c, double threshold,
                             const std::function<double(const ObjectBox&, const ObjectBox&)>& iou) {
  std::vector<std::size_t> rank(c.predictions.size());
  for (std::size_t i = 0; i < rank.size(); ++i) rank[i] = i;
  std::sort(rank.begin(), rank.end(),
            [&](std::size_t a, std::size_t b) { return c.predictions[a].score > c.predictions[b].score; });

  const std::size_t np = rank.size(), ng = c.gt.size();
  std::vector<int> assign(np, -1), best_assign(np, -1);
  std::vector<double> best_key(np, -1.0);
  std::vector<bool> used(ng, false);
  bool have = false;

  std::function<void(std::size_t)> rec = [&](std::size_t k) {
    if (k == np) {
      std::vector<double> key(np);
      for (std::size_t i = 0; i < np; ++i)
        key[i] = assign[i] < 0 ? 0.0 : iou(c.predictions[rank[i]].box, c.gt[static_cast<std::size_t>(assign[i])]);
      if (!have || key > best_key) {
        have = true;
        best_key = key;
        best_assign = assign;
      }
      return;
    }
    assign[k] = -1;
    rec(k + 1);
    for (std::size_t g = 0; g < ng; ++g) {
      if (used[g] || iou(c.predictions[rank[k]].box, c.gt[g]) < threshold) continue;
      used[g] = true;
      assign[k] = static_cast<int>(g);
      rec(k + 1);
      used[g] = false;
      assign[k] = -1;
    }
  };
  rec(0);
  if (ng == 0) return 0.0;

  // precision/recall after each ranked prediction
  std::vector<double> prec, recall;
  int tp = 0;
  for (std::size_t i = 0; i < np; ++i) {
    tp += best_assign[i] >= 0;
    prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(ng));
  }
  double ap = 0.0;
  for (int k = 1; k <= 40; ++k) {
    double p = 0.0;
    for (std::size_t i = 0; i < np; ++i)
      if (recall[i] * 40.0 >= k - 1e-9) p = std::max(p, prec[i]);
    ap += p / 40.0;
  }
  return ap;
}

/// Random micro case: up to `max_gt` boxes, up to `max_pred` predictions that
/// are jittered copies of gt or strays.
inline MicroCase random_micro_case(std::mt19937_64& rng, int max_pred = 6, int max_gt = 4) {
  std::uniform_real_distribution<double> pos(-6.0, 6.0), yaw(-3.14159, 3.14159), len(3.0, 5.0), wid(1.5, 2.2),
      jit(-0.8, 0.8), jyaw(-0.4, 0.4), unit(0.0, 1.0);
  MicroCase c;
  const int ng = static_cast<int>(rng() % static_cast<unsigned>(max_gt + 1));
  const int np = static_cast<int>(rng() % static_cast<unsigned>(max_pred + 1));
  for (int i = 0; i < ng; ++i) {
    ObjectBox b;
    b.id = i;
    b.center = {pos(rng), pos(rng)};
    b.length = len(rng);
    b.width = wid(rng);
    b.yaw = yaw(rng);
    c.gt.push_back(b);
  }
  for (int i = 0; i < np; ++i) {
    ObjectBox b;
    if (ng > 0 && unit(rng) < 0.75) {
      b = c.gt[rng() % static_cast<unsigned>(ng)];
      b.center.x += jit(rng);
      b.center.y += jit(rng);
      b.yaw += jyaw(rng);
    } else {
      b.center = {pos(rng), pos(rng)};
      b.length = len(rng);
      b.width = wid(rng);
      b.yaw = yaw(rng);
    }
    c.predictions.push_back({b, 0.05 + 0.9 * unit(rng) + 1e-6 * i});
  }
  return c;
}

}  // namespace coperc::testing
