#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "coperc/autodiff/grad_policy.hpp"
#include "coperc/controller/controller.hpp"
#include "coperc/models/model.hpp"
#include "coperc/scene/augment.hpp"

namespace coperc::train {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  int epochs = 30;
  std::size_t batch_size = 2;
  double lr = 0.002;
  double weight_decay = 1e-4;
  std::vector<int> lr_drops{9, 18};
  double lr_drop_factor = 0.1;
  GradPolicy ngrad = GradPolicy::all();
  std::uint64_t seed = 0;  // parameter init, shuffling, augmentation, naive fusion

  models::ModelConfig model;
  double comm_range = 14.0;
  std::size_t max_cooperators = 7;
  int min_box_points = 2;
  bool box_points_ego_only = false;  // "box_points = ego"; default counts the fused cloud
  // Flips and scaling only: scenes share one road orientation, so large
  // rotations push the road out of the elongated grid.
  AugmentConfig augment{.enabled = true, .max_rotation = 0.0};
  double reg_weight = 1.0;

  double score_threshold = 0.3;
  double nms_iou = 0.3;

  std::filesystem::path train_data;
  std::filesystem::path test_data;
  std::filesystem::path out_dir = "run";
  /// Checkpoint evaluated by `test`; empty means `<out_dir>/model.ckpt`.
  std::filesystem::path checkpoint;
  /// Frames per run in vis/test; 0 means the whole set.
  std::size_t max_frames = 0;

  controller::ControllerConfig controller_config() const;
  std::filesystem::path checkpoint_path() const;
};

/// Flat `key = value` text, `#` starts a comment. Unknown keys and malformed
/// values throw ConfigError naming the line. Relative paths resolve against
/// `base_dir`.
TrainConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
TrainConfig load_config(const std::filesystem::path& path);
std::string to_text(const TrainConfig& config);

}  // namespace coperc::train
