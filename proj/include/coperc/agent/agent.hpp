#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "coperc/ids.hpp"
#include "coperc/models/model.hpp"
#include "coperc/scene/geometry.hpp"

namespace coperc::agent {

enum class Mode { kTrain, kTest, kVis };

std::string to_string(Mode mode);
/// "train", "test" or "vis"; anything else throws std::invalid_argument.
Mode parse_mode(const std::string& text);

/// Default pipeline stages. Stage 0 holds the raw inputs distributed by the
/// data manager.
namespace stage {
inline constexpr int kInput = 0;
inline constexpr int kPreprocess = 1;  // project to ego + augment + pillarize
inline constexpr int kEncode = 2;
inline constexpr int kShare = 3;  // CPM to the ego, non-ego agents only
inline constexpr int kFuse = 4;   // ego only
inline constexpr int kHead = 5;   // ego only, detections (+ loss in training)
inline constexpr int kLast = kHead;
}  // namespace stage

/// Staging key: (agent, stage, slot).
struct SlotKey {
  CavId agent = 0;
  int stage = 0;
  std::string slot;

  auto operator<=>(const SlotKey&) const = default;
  std::string str() const;
};

/// Collective perception message: an ego-frame feature map sent to the ego.
struct Cpm {
  CavId sender = 0;
  CavId receiver = 0;
  models::BevFeatureMap map;
  std::int64_t payload = 0;  // h * w * d
};

struct Preprocessed {
  PointCloud cloud;  // ego frame, augmented
  models::PillarInput pillars;
};

struct HeadOutput {
  models::DetectionOutput detections;
  bool has_loss = false;
  models::LossParts loss;
};

using Value = std::variant<PointCloud, Preprocessed, models::BevFeatureMap, Cpm, HeadOutput>;

struct CavState {
  CavId id = 0;
  Pose pose;
  bool is_ego = false;
  bool tracked = false;  // gradient policy result
  PointCloud cloud;      // sensor frame, as loaded
};

struct Task {
  CavId agent = 0;
  std::string module;
  bool needs_grad = false;
  std::vector<SlotKey> inputs;
  int stage = 0;
  SlotKey output;
};

/// Agents within Euclidean distance strictly below `range` of the ego,
/// nearest first (ties by lower id), at most `cap`. The ego is excluded.
std::vector<CavState> neighbors(std::span<const CavState> cavs, const CavState& ego, double range,
                                std::size_t cap = 7);

struct PipelineContext {
  Mode mode = Mode::kTrain;
  CavId ego = 0;
  /// Cooperators in fusion order (ascending id).
  std::vector<CavId> cooperators;
};

/// Tasks an agent emits at `stage` of the default pipeline.
std::vector<Task> cav_pipeline(const CavState& state, int stage, const PipelineContext& ctx);

}  // namespace coperc::agent
