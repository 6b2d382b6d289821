#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coperc/controller/controller.hpp"
#include "coperc/train/config.hpp"
#include "coperc/train/eval.hpp"
#include "coperc/train/optim.hpp"

namespace coperc::train {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Cost of one optimizer step.
struct StepCost {
  int epoch = 0;
  std::int64_t step = 0;
  /// Peak scalars held for backward on the step's tape.
  std::int64_t peak_activations = 0;
  /// Gradient slots reaching encoder outputs after backward.
  std::int64_t grad_slots = 0;
  /// Gradient slots on fused maps (what the fusion back-propagates from).
  std::int64_t fusion_slots = 0;
  std::int64_t tracked_agents = 0;
  double wall_ms = 0.0;  // not part of the deterministic record
};

struct CostReport {
  std::vector<StepCost> steps;

  std::int64_t max_peak_activations() const;
  double mean_peak_activations() const;
  std::int64_t max_grad_slots() const;
  std::int64_t max_fusion_slots() const;
  double total_wall_ms() const;
  /// Deterministic fields only unless `with_time`.
  nlohmann::json to_json(bool with_time = false) const;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  std::int64_t steps = 0;
};

struct StepOutcome {
  double loss = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  StepCost cost;
  std::vector<controller::FrameResult> results;
};

/// Shared modules, controller and optimizer of one training run.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& config);

  /// Forward every frame of the batch, backward the mean loss, one Adam step.
  StepOutcome step(std::span<const dataio::FrameSample> batch, int epoch);

  models::ModelParams& params() { return params_; }
  const models::ModelParams& params() const { return params_; }
  controller::Controller& controller() { return controller_; }
  Adam& optimizer() { return adam_; }
  std::int64_t steps() const { return step_; }

 private:
  TrainConfig config_;
  models::ModelParams params_;
  controller::Controller controller_;
  Adam adam_;
  Rng aug_rng_;
  Rng fusion_rng_;
  std::int64_t step_ = 0;
};

/// Operator-visible snapshot after one runner step.
struct FrameEvent {
  std::int64_t index = 0;
  agent::Mode mode = agent::Mode::kVis;
  std::string scenario_id;
  int frame = 0;
  int epoch = 0;
  CavId ego = 0;
  std::vector<std::pair<CavId, std::vector<LidarPoint>>> points;  // ego frame, downsampled
  std::vector<ObjectBox> gt;
  std::vector<models::ScoredBox> predictions;
  std::optional<double> loss;
  nlohmann::json metrics = nlohmann::json::object();
  std::optional<StepCost> cost;
};

inline constexpr std::size_t kMaxEventPoints = 5000;

/// Builds the event for a frame result; points beyond kMaxEventPoints per CAV
/// are subsampled uniformly with a generator seeded from (seed, index).
FrameEvent make_event(const controller::FrameResult& result, std::int64_t index, std::uint64_t seed,
                      const TrainConfig& config);

/// Hooks a served runner obeys; a free run passes none.
class RunObserver {
 public:
  virtual ~RunObserver() = default;
  /// Blocks until the next step may run; false aborts the run.
  virtual bool await_step() = 0;
  virtual void on_event(const FrameEvent& event) = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  CostReport cost;
  bool aborted = false;
};

struct EvalReport {
  ApResult ap50;
  ApResult ap70;
  std::size_t frames = 0;
  nlohmann::json to_json() const;
};

/// Trains on `config.train_data`, writing metrics.jsonl, cost.jsonl,
/// timing.jsonl, config.txt and the checkpoint under `config.out_dir`.
TrainResult train(const TrainConfig& config, RunObserver* observer = nullptr, std::ostream* log = nullptr);

/// Test-mode pass over `config.test_data`: decode, NMS, AP@0.5 and AP@0.7.
EvalReport evaluate(const TrainConfig& config, const models::ModelParams& params, RunObserver* observer = nullptr);

/// Predictions of one test-mode frame result after decoding and NMS.
std::vector<models::ScoredBox> predictions_of(const controller::FrameResult& result, const TrainConfig& config);

/// Vis-mode pass: data only, no model. Returns the number of frames served.
std::size_t visualize(const TrainConfig& config, RunObserver* observer = nullptr);

/// Dispatches a runner; the returned JSON summarizes the run.
nlohmann::json run_mode(agent::Mode mode, const TrainConfig& config, RunObserver* observer = nullptr,
                        std::ostream* log = nullptr);

}  // namespace coperc::train
