#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "coperc/agent/agent.hpp"
#include "coperc/autodiff/grad_policy.hpp"
#include "coperc/autodiff/tape.hpp"
#include "coperc/dataio/dataio.hpp"
#include "coperc/models/model.hpp"
#include "coperc/scene/augment.hpp"

namespace coperc::controller {

using agent::CavState;
using agent::Mode;
using agent::SlotKey;
using agent::Task;
using agent::Value;

/// Scheduling or staging contract violation (missing input, stage cycle).
class SchedulingError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Staging store keyed by (agent, stage, slot).
class DataManager {
 public:
  void put(const SlotKey& key, Value value);
  const Value& get(const SlotKey& key) const;
  bool has(const SlotKey& key) const { return store_.count(key) != 0; }

  std::vector<Value> gather(std::span<const SlotKey> keys) const;
  void scatter(std::span<const SlotKey> keys, std::vector<Value> values);
  /// Keys staged at `stage`, in agent-id order.
  std::vector<SlotKey> keys_at(int stage) const;

  /// Frees the agent's entries; later lookups name it as retired.
  void retire(CavId agent);
  void clear() { store_.clear(); }
  std::size_t size() const { return store_.size(); }

 private:
  std::map<SlotKey, Value> store_;
  std::set<CavId> retired_;
};

struct BatchedTask {
  std::string module;
  bool needs_grad = false;
  int stage = 0;
  std::vector<Task> members;  // ascending agent id
  std::string shape_class;
};

/// Input shape signature of a task from its staged values.
std::string shape_signature(const Task& task, const DataManager& data);

/// Partitions by (module, needs_grad, shape class). Batches are ordered grad
/// first, then module and shape class; members by ascending agent id.
std::vector<BatchedTask> batch_tasks(std::span<const Task> tasks, const DataManager* data = nullptr);

/// Per-frame inputs the forward runner's modules may read.
struct FrameContext {
  Mode mode = Mode::kTrain;
  CavId ego = 0;
  Pose ego_pose;
  AugParams aug;
  Rng* rng = nullptr;  // naive fusion draws
  std::vector<ObjectBox> gt;  // ego frame, augmented, filtered
  ad::Tape* tape = nullptr;
  double reg_weight = 1.0;
};

struct ExecContext {
  const DataManager& data;
  const FrameContext& frame;
  const models::ModelConfig& model;
  const models::ParamView& params;  // tracked iff the batch needs gradients
};

/// Agent prototype: the tasks an agent emits at a stage.
using PipelineFn = std::function<std::vector<Task>(const CavState&, int, const agent::PipelineContext&)>;

/// A forward-runner module: one output per member, in member order.
using ModuleFn = std::function<std::vector<Value>(const BatchedTask&, const ExecContext&)>;

struct ControllerConfig {
  models::ModelConfig model;
  double comm_range = 14.0;
  std::size_t max_cooperators = 7;
  GradPolicy policy = GradPolicy::all();
  /// Ground-truth boxes need at least this many points, counted in the fused
  /// cloud of all active CAVs or, with `box_points_ego_only`, the ego's alone.
  int min_box_points = 2;
  bool box_points_ego_only = false;
  double reg_weight = 1.0;
};

struct BatchRecord {
  int stage = 0;
  std::string module;
  bool needs_grad = false;
  std::vector<CavId> members;
};

struct FrameResult {
  std::string scenario_id;
  int frame = 0;
  CavId ego = 0;
  Mode mode = Mode::kTrain;
  std::vector<std::pair<CavId, PointCloud>> points;  // ego frame, augmented
  std::vector<ObjectBox> gt;
  std::optional<models::DetectionOutput> detections;
  std::optional<models::LossParts> loss;
  std::vector<BatchRecord> batches;  // in execution order
  std::vector<CavId> tracked;
  std::int64_t cpm_payload = 0;
};

struct StepOptions {
  AugParams aug;
  Rng* rng = nullptr;
};

class Controller {
 public:
  Controller(ControllerConfig config, const models::ModelParams* params);

  /// Watches the shared parameters on `tape` for the frames of one training
  /// step; nullptr ends the step.
  void begin_step(ad::Tape* tape);
  const models::ParamView& tracked_params() const { return tracked_; }

  FrameResult step_frame(const dataio::FrameSample& frame, Mode mode, const StepOptions& options = {});

  void register_module(const std::string& name, ModuleFn fn);
  /// Replaces the default agent pipeline; `last_stage` is the ego head stage.
  void set_pipeline(PipelineFn fn, int last_stage);
  void set_policy(GradPolicy policy) { config_.policy = policy; }
  void set_params(const models::ModelParams* params);

  const std::map<CavId, CavState>& cavs() const { return cavs_; }
  const DataManager& data() const { return data_; }
  const ControllerConfig& config() const { return config_; }

 private:
  void update_cavs(const dataio::FrameSample& frame);
  void run_batch(const BatchedTask& batch, const FrameContext& ctx);

  ControllerConfig config_;
  const models::ModelParams* params_;
  models::ParamView plain_;
  models::ParamView tracked_;
  ad::Tape* tape_ = nullptr;
  std::map<CavId, CavState> cavs_;
  DataManager data_;
  std::map<std::string, ModuleFn> modules_;
  PipelineFn pipeline_ = agent::cav_pipeline;
  int last_stage_ = agent::stage::kLast;
};

/// The default forward-runner modules: preprocess, encoder, share, fusion, head.
std::map<std::string, ModuleFn> default_modules();

}  // namespace coperc::controller
