#pragma once

#include <span>
#include <vector>

#include "coperc/models/model.hpp"
#include "coperc/scene/geometry.hpp"

namespace coperc::train {

inline constexpr int kRecallPoints = 40;

/// Intersection over union of two rotated boxes, by convex polygon clipping.
double rotated_iou(const ObjectBox& a, const ObjectBox& b);

/// Area of a simple polygon (shoelace, absolute value).
double polygon_area(std::span<const Vec2> poly);

/// Clips a convex polygon against a convex counter-clockwise clip polygon.
std::vector<Vec2> clip_convex(std::vector<Vec2> subject, std::span<const Vec2> clip);

/// Greedy rotated-box NMS: descending score, drop boxes overlapping a kept
/// box with IoU > `iou_threshold`.
std::vector<models::ScoredBox> nms(std::vector<models::ScoredBox> boxes, double iou_threshold);

/// Predictions and ground truth of one frame, same coordinate frame.
struct EvalFrame {
  std::vector<models::ScoredBox> predictions;
  std::vector<ObjectBox> gt;
};

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct ApResult {
  double iou_threshold = 0.0;
  double ap = 0.0;
  std::vector<PrPoint> curve;  // one point per ranked prediction
  int true_positives = 0;
  int false_positives = 0;
  int false_negatives = 0;
};

/// Predictions ranked by descending score across frames (ties: frame, then
/// index); each takes the unmatched gt of its frame with the highest IoU
/// >= threshold. AP is the mean interpolated precision at recall
/// 1/40, 2/40, ..., 1. With no ground truth AP is 0.
ApResult average_precision(std::span<const EvalFrame> frames, double iou_threshold);

}  // namespace coperc::train
