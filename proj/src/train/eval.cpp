#include "coperc/train/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace coperc::train {
namespace {

double cross(Vec2 o, Vec2 a, Vec2 b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

Vec2 intersect(Vec2 p, Vec2 q, Vec2 a, Vec2 b) {
  // segment p-q with the line through a-b
  const double d1 = cross(a, b, p);
  const double d2 = cross(a, b, q);
  const double t = d1 / (d1 - d2);
  return {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
}

}  // namespace

double polygon_area(std::span<const Vec2> poly) {
  if (poly.size() < 3) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2 a = poly[i], b = poly[(i + 1) % poly.size()];
    s += a.x * b.y - b.x * a.y;
  }
  return 0.5 * std::abs(s);
}

std::vector<Vec2> clip_convex(std::vector<Vec2> subject, std::span<const Vec2> clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Vec2 a = clip[e], b = clip[(e + 1) % clip.size()];
    std::vector<Vec2> out;
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const Vec2 p = subject[i], q = subject[(i + 1) % subject.size()];
      const bool pin = cross(a, b, p) >= 0.0;
      const bool qin = cross(a, b, q) >= 0.0;
      if (pin) out.push_back(p);
      if (pin != qin) out.push_back(intersect(p, q, a, b));
    }
    subject = std::move(out);
  }
  return subject;
}

double rotated_iou(const ObjectBox& a, const ObjectBox& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const double area_a = a.length * a.width;
  const double area_b = b.length * b.width;
  // both clip orders, averaged, so iou(a, b) == iou(b, a) exactly
  const auto ab = clip_convex(std::vector<Vec2>(ca.begin(), ca.end()), cb);
  const auto ba = clip_convex(std::vector<Vec2>(cb.begin(), cb.end()), ca);
  const double inter = std::min(0.5 * (polygon_area(ab) + polygon_area(ba)), std::min(area_a, area_b));
  const double uni = area_a + area_b - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<models::ScoredBox> nms(std::vector<models::ScoredBox> boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(), [](const auto& x, const auto& y) { return x.score > y.score; });
  std::vector<models::ScoredBox> kept;
  for (const auto& b : boxes) {
    bool keep = true;
    for (const auto& k : kept) {
      if (rotated_iou(b.box, k.box) > iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(b);
  }
  return kept;
}

ApResult average_precision(std::span<const EvalFrame> frames, double iou_threshold) {
  struct Ranked {
    double score;
    std::size_t frame, index;
  };
  std::vector<Ranked> ranked;
  int n_gt = 0;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    n_gt += static_cast<int>(frames[f].gt.size());
    for (std::size_t i = 0; i < frames[f].predictions.size(); ++i) ranked.push_back({frames[f].predictions[i].score, f, i});
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& x, const Ranked& y) {
    if (x.score != y.score) return x.score > y.score;
    if (x.frame != y.frame) return x.frame < y.frame;
    return x.index < y.index;
  });

  std::vector<std::vector<bool>> used(frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f) used[f].assign(frames[f].gt.size(), false);

  ApResult r;
  r.iou_threshold = iou_threshold;
  int tp = 0, fp = 0;
  for (const auto& p : ranked) {
    const auto& fr = frames[p.frame];
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < fr.gt.size(); ++g) {
      if (used[p.frame][g]) continue;
      const double iou = rotated_iou(fr.predictions[p.index].box, fr.gt[g]);
      if (iou >= best_iou && (best < 0 || iou > best_iou)) {
        best = static_cast<int>(g);
        best_iou = iou;
      }
    }
    if (best >= 0) {
      used[p.frame][static_cast<std::size_t>(best)] = true;
      ++tp;
    } else {
      ++fp;
    }
    r.curve.push_back({n_gt > 0 ? static_cast<double>(tp) / n_gt : 0.0, static_cast<double>(tp) / (tp + fp)});
  }
  r.true_positives = tp;
  r.false_positives = fp;
  r.false_negatives = n_gt - tp;
  if (n_gt == 0) return r;

  double sum = 0.0;
  for (int k = 1; k <= kRecallPoints; ++k) {
    const double rec = static_cast<double>(k) / kRecallPoints;
    double best = 0.0;
    for (const auto& pt : r.curve)
      if (pt.recall >= rec - 1e-12) best = std::max(best, pt.precision);
    sum += best;
  }
  r.ap = sum / kRecallPoints;
  return r;
}

}  // namespace coperc::train
