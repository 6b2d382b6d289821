#include "coperc/controller/controller.hpp"

#include <algorithm>
#include <sstream>
#include <tuple>

namespace coperc::controller {
namespace {

template <typename T>
const T& as(const Value& v, const SlotKey& key) {
  if (const T* p = std::get_if<T>(&v)) return *p;
  throw SchedulingError("staged value at " + key.str() + " has an unexpected type");
}

std::string shape_str(const ad::Shape& s) { return ad::to_string(s); }

}  // namespace

// ---- DataManager ------------------------------------------------------------

void DataManager::put(const SlotKey& key, Value value) {
  retired_.erase(key.agent);
  store_.insert_or_assign(key, std::move(value));
}

const Value& DataManager::get(const SlotKey& key) const {
  auto it = store_.find(key);
  if (it != store_.end()) return it->second;
  if (retired_.count(key.agent)) {
    throw SchedulingError("no staged value at " + key.str() + ": agent " + std::to_string(key.agent) +
                          " was retired");
  }
  throw SchedulingError("no staged value at " + key.str());
}

std::vector<Value> DataManager::gather(std::span<const SlotKey> keys) const {
  std::vector<Value> out;
  out.reserve(keys.size());
  for (const auto& k : keys) out.push_back(get(k));
  return out;
}

void DataManager::scatter(std::span<const SlotKey> keys, std::vector<Value> values) {
  if (keys.size() != values.size()) throw SchedulingError("scatter: key and value counts differ");
  for (std::size_t i = 0; i < keys.size(); ++i) put(keys[i], std::move(values[i]));
}

std::vector<SlotKey> DataManager::keys_at(int stage) const {
  std::vector<SlotKey> out;
  for (const auto& [k, v] : store_) {
    if (k.stage == stage) out.push_back(k);
  }
  return out;  // map order: agent id, then stage, then slot
}

void DataManager::retire(CavId agent) {
  for (auto it = store_.begin(); it != store_.end();) {
    it = it->first.agent == agent ? store_.erase(it) : std::next(it);
  }
  retired_.insert(agent);
}

// ---- batching ---------------------------------------------------------------

std::string shape_signature(const Task& task, const DataManager& data) {
  std::ostringstream os;
  for (const auto& key : task.inputs) {
    if (!data.has(key)) {
      os << "?;";
      continue;
    }
    const auto& v = data.get(key);
    if (std::holds_alternative<PointCloud>(v)) os << "cloud;";
    else if (const auto* p = std::get_if<agent::Preprocessed>(&v)) os << "pillars" << shape_str(p->pillars.features.shape()) << ';';
    else if (const auto* m = std::get_if<models::BevFeatureMap>(&v)) os << "bev" << shape_str(m->grid.shape()) << ';';
    else if (const auto* c = std::get_if<agent::Cpm>(&v)) os << "cpm" << shape_str(c->map.grid.shape()) << ';';
    else os << "head;";
  }
  return os.str();
}

std::vector<BatchedTask> batch_tasks(std::span<const Task> tasks, const DataManager* data) {
  using Key = std::tuple<bool, std::string, std::string>;  // (!needs_grad, module, shape)
  std::map<Key, BatchedTask> groups;
  for (const auto& t : tasks) {
    const std::string shape = data ? shape_signature(t, *data) : std::string();
    auto& g = groups[Key{!t.needs_grad, t.module, shape}];
    g.module = t.module;
    g.needs_grad = t.needs_grad;
    g.stage = t.stage;
    g.shape_class = shape;
    g.members.push_back(t);
  }
  std::vector<BatchedTask> out;
  for (auto& [k, g] : groups) {
    std::stable_sort(g.members.begin(), g.members.end(), [](const Task& a, const Task& b) { return a.agent < b.agent; });
    out.push_back(std::move(g));
  }
  return out;
}

// ---- Controller ---------------------------------------------------------------

Controller::Controller(ControllerConfig config, const models::ModelParams* params)
    : config_(std::move(config)), modules_(default_modules()) {
  config_.model.grid.validate();
  set_params(params);
}

void Controller::set_params(const models::ModelParams* params) {
  params_ = params;
  plain_ = params ? params->view(nullptr) : models::ParamView{};
  tracked_.clear();
  tape_ = nullptr;
}

void Controller::begin_step(ad::Tape* tape) {
  tape_ = tape;
  tracked_.clear();
  if (tape && params_) tracked_ = params_->view(tape);
}

void Controller::register_module(const std::string& name, ModuleFn fn) { modules_[name] = std::move(fn); }

void Controller::set_pipeline(PipelineFn fn, int last_stage) {
  pipeline_ = std::move(fn);
  last_stage_ = last_stage;
}

void Controller::update_cavs(const dataio::FrameSample& frame) {
  std::set<CavId> present;
  for (const auto& c : frame.cavs) {
    present.insert(c.id);
    auto& s = cavs_[c.id];
    s.id = c.id;
    s.pose = c.pose;
    s.is_ego = c.id == frame.ego;
    s.tracked = false;
    s.cloud = c.cloud;
    s.cloud.frame_pose = c.pose;
  }
  for (auto it = cavs_.begin(); it != cavs_.end();) {
    if (present.count(it->first)) {
      ++it;
      continue;
    }
    data_.retire(it->first);
    it = cavs_.erase(it);
  }
  if (!cavs_.count(frame.ego)) {
    throw SchedulingError("frame " + std::to_string(frame.frame) + " names ego " + std::to_string(frame.ego) +
                          " but carries no data for it");
  }
}

void Controller::run_batch(const BatchedTask& batch, const FrameContext& ctx) {
  auto it = modules_.find(batch.module);
  if (it == modules_.end()) throw SchedulingError("no module registered as '" + batch.module + "'");
  if (batch.needs_grad && tracked_.empty()) {
    throw SchedulingError("batch " + batch.module + " needs gradients but no training step is open");
  }
  ExecContext ectx{data_, ctx, config_.model, batch.needs_grad ? tracked_ : plain_};
  auto outputs = it->second(batch, ectx);
  if (outputs.size() != batch.members.size()) {
    throw SchedulingError("module " + batch.module + " returned " + std::to_string(outputs.size()) +
                          " outputs for " + std::to_string(batch.members.size()) + " members");
  }
  for (std::size_t i = 0; i < outputs.size(); ++i) data_.put(batch.members[i].output, std::move(outputs[i]));
}

FrameResult Controller::step_frame(const dataio::FrameSample& frame, Mode mode, const StepOptions& options) {
  if (mode == Mode::kTrain && !tape_) throw SchedulingError("train mode requires an open training step");
  if (mode != Mode::kVis && !params_) throw SchedulingError(agent::to_string(mode) + " mode requires model parameters");

  // (1) CAV manager
  update_cavs(frame);
  const CavState& ego = cavs_.at(frame.ego);
  std::vector<CavState> all;
  for (const auto& [id, s] : cavs_) all.push_back(s);
  const auto nbrs = agent::neighbors(all, ego, config_.comm_range, config_.max_cooperators);

  std::vector<AgentDistance> dist;
  for (const auto& n : nbrs) dist.push_back({n.id, distance(n.pose, ego.pose)});
  FrameResult res;
  if (mode == Mode::kTrain) res.tracked = config_.policy.select(ego.id, dist);
  for (auto& [id, s] : cavs_) s.tracked = std::find(res.tracked.begin(), res.tracked.end(), id) != res.tracked.end();

  std::vector<CavId> active{ego.id};
  agent::PipelineContext pctx{mode, ego.id, {}};
  for (const auto& n : nbrs) {
    active.push_back(n.id);
    pctx.cooperators.push_back(n.id);
  }
  std::sort(active.begin(), active.end());
  std::sort(pctx.cooperators.begin(), pctx.cooperators.end());

  // (2) data manager distributes the frame
  data_.clear();
  for (CavId id : active) data_.put({id, agent::stage::kInput, "cloud"}, cavs_.at(id).cloud);

  FrameContext ctx{mode, ego.id, ego.pose, options.aug, options.rng, {}, tape_, config_.reg_weight};
  res.scenario_id = frame.scenario_id;
  res.frame = frame.frame;
  res.ego = ego.id;
  res.mode = mode;

  // (3)-(5) stage loop
  for (int st = agent::stage::kPreprocess; st <= last_stage_; ++st) {
    std::vector<Task> tasks;
    for (CavId id : active) {
      for (auto& t : pipeline_(cavs_.at(id), st, pctx)) {
        for (const auto& in : t.inputs) {
          if (in.stage >= t.stage) {
            throw SchedulingError("cyclic stage dependency: " + t.module + " of cav" + std::to_string(t.agent) +
                                  " at stage " + std::to_string(t.stage) + " -> " + in.str());
          }
          if (!data_.has(in)) {
            throw SchedulingError("missing staged input " + in.str() + " for " + t.module + " of cav" +
                                  std::to_string(t.agent) + " at stage " + std::to_string(t.stage));
          }
        }
        tasks.push_back(std::move(t));
      }
    }
    auto batches = batch_tasks(tasks, &data_);
    // no-grad batches first, then the gradient batches
    for (bool grad : {false, true}) {
      for (const auto& b : batches) {
        if (b.needs_grad != grad) continue;
        run_batch(b, ctx);
        BatchRecord rec{st, b.module, b.needs_grad, {}};
        for (const auto& m : b.members) rec.members.push_back(m.agent);
        res.batches.push_back(std::move(rec));
      }
    }

    if (st == agent::stage::kPreprocess) {
      std::vector<PointCloud> clouds;
      for (CavId id : active) {
        const SlotKey key{id, agent::stage::kPreprocess, "pillars"};
        if (!data_.has(key)) continue;  // custom prototypes may stage elsewhere
        const auto& pre = as<agent::Preprocessed>(data_.get(key), key);
        if (!config_.box_points_ego_only || id == ego.id) clouds.push_back(pre.cloud);
        res.points.emplace_back(id, pre.cloud);
      }
      std::vector<ObjectBox> boxes;
      for (const auto& b : frame.global_boxes()) {
        auto local = options.aug.apply(b.to_local(ego.pose));
        if (config_.model.grid.contains(local.center.x, local.center.y)) boxes.push_back(local);
      }
      ctx.gt = filter_sparse_boxes(boxes, clouds, config_.min_box_points);
      res.gt = ctx.gt;
    }
  }

  for (const auto& key : data_.keys_at(agent::stage::kShare)) {
    if (const auto* c = std::get_if<agent::Cpm>(&data_.get(key))) res.cpm_payload += c->payload;
  }
  const SlotKey head_key{ego.id, agent::stage::kHead, "detections"};
  if (data_.has(head_key)) {
    const auto& h = as<agent::HeadOutput>(data_.get(head_key), head_key);
    res.detections = h.detections;
    if (h.has_loss) res.loss = h.loss;
  }
  data_.clear();
  return res;
}

// ---- default modules --------------------------------------------------------------

std::map<std::string, ModuleFn> default_modules() {
  std::map<std::string, ModuleFn> m;

  m["preprocess"] = [](const BatchedTask& b, const ExecContext& ctx) {
    std::vector<Value> out;
    for (const auto& t : b.members) {
      const auto& cloud = as<PointCloud>(ctx.data.get(t.inputs[0]), t.inputs[0]);
      agent::Preprocessed p;
      p.cloud = ctx.frame.aug.apply(transform_to_ego(cloud, ctx.frame.ego_pose));
      p.pillars = models::pillarize(p.cloud.points, ctx.model.grid, ctx.model.max_points);
      out.emplace_back(std::move(p));
    }
    return out;
  };

  m["encoder"] = [](const BatchedTask& b, const ExecContext& ctx) {
    std::vector<models::PillarInput> ins;
    for (const auto& t : b.members) ins.push_back(as<agent::Preprocessed>(ctx.data.get(t.inputs[0]), t.inputs[0]).pillars);
    ad::Tensor batched = models::encode_batch(ins, ctx.params, ctx.model);
    if (b.needs_grad && ctx.frame.tape) ctx.frame.tape->mark(batched, "encoder_output");
    std::vector<Value> out;
    for (std::size_t i = 0; i < ins.size(); ++i) out.emplace_back(models::unstack(batched, static_cast<std::int64_t>(i)));
    return out;
  };

  m["share"] = [](const BatchedTask& b, const ExecContext& ctx) {
    std::vector<Value> out;
    for (const auto& t : b.members) {
      const auto& map = as<models::BevFeatureMap>(ctx.data.get(t.inputs[0]), t.inputs[0]);
      out.emplace_back(agent::Cpm{t.agent, ctx.frame.ego, map, map.grid.numel()});
    }
    return out;
  };

  m["fusion"] = [](const BatchedTask& b, const ExecContext& ctx) {
    std::vector<Value> out;
    for (const auto& t : b.members) {
      std::vector<models::BevFeatureMap> maps;
      for (const auto& key : t.inputs) {
        const auto& v = ctx.data.get(key);
        if (const auto* c = std::get_if<agent::Cpm>(&v)) maps.push_back(c->map);
        else maps.push_back(as<models::BevFeatureMap>(v, key));
      }
      switch (ctx.model.fusion) {
        case models::FusionKind::kMaxout:
          out.emplace_back(models::fuse_maxout(maps));
          break;
        case models::FusionKind::kAttention:
          out.emplace_back(models::fuse_attention(maps, 0, ctx.params));
          break;
        case models::FusionKind::kNaive: {
          if (!ctx.frame.rng) throw SchedulingError("naive fusion needs a random generator");
          std::vector<std::vector<std::uint8_t>> valid;
          for (const auto& mp : maps) valid.push_back(models::nonzero_cells(mp));
          out.emplace_back(models::fuse_naive(maps, valid, *ctx.frame.rng));
          break;
        }
      }
      if (b.needs_grad && ctx.frame.tape) ctx.frame.tape->mark(std::get<models::BevFeatureMap>(out.back()).grid, "fusion_output");
    }
    return out;
  };

  m["head"] = [](const BatchedTask& b, const ExecContext& ctx) {
    std::vector<Value> out;
    for (const auto& t : b.members) {
      const auto& fused = as<models::BevFeatureMap>(ctx.data.get(t.inputs[0]), t.inputs[0]);
      agent::HeadOutput h;
      h.detections = models::detect_head(fused, ctx.params, ctx.model);
      if (ctx.frame.mode == Mode::kTrain) {
        h.loss = models::detection_loss(h.detections, ctx.frame.gt, ctx.model.grid, ctx.frame.reg_weight);
        h.has_loss = true;
      }
      out.emplace_back(std::move(h));
    }
    return out;
  };

  return m;
}

}  // namespace coperc::controller
