#include "coperc/train/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "coperc/autodiff/ops.hpp"
#include "coperc/models/checkpoint.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace coperc::train {
namespace {

// Stream tags for Rng::derive.
constexpr std::uint64_t kShuffleTag = 0x5u;
constexpr std::uint64_t kAugTag = 0xA6u;
constexpr std::uint64_t kFusionTag = 0xF0u;
constexpr std::uint64_t kEvalTag = 0xE7u;
constexpr std::uint64_t kEventTag = 0xEEu;

dataio::FrameLoader make_loader(const fs::path& dir, std::size_t batch, std::optional<std::uint64_t> shuffle) {
  auto metas = dataio::list_meta_files(dir);
  if (metas.empty()) throw TrainError("no meta files in " + dir.string());
  dataio::LoaderOptions lo;
  lo.batch_size = batch;
  lo.shuffle_seed = shuffle;
  lo.prefetch = 4;
  return dataio::FrameLoader(std::move(metas), std::move(lo));
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw TrainError("cannot write " + p.string());
  return os;
}

}  // namespace

// ---- CostReport ---------------------------------------------------------------

std::int64_t CostReport::max_peak_activations() const {
  std::int64_t m = 0;
  for (const auto& s : steps) m = std::max(m, s.peak_activations);
  return m;
}

double CostReport::mean_peak_activations() const {
  if (steps.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : steps) s += static_cast<double>(c.peak_activations);
  return s / static_cast<double>(steps.size());
}

std::int64_t CostReport::max_grad_slots() const {
  std::int64_t m = 0;
  for (const auto& s : steps) m = std::max(m, s.grad_slots);
  return m;
}

std::int64_t CostReport::max_fusion_slots() const {
  std::int64_t m = 0;
  for (const auto& s : steps) m = std::max(m, s.fusion_slots);
  return m;
}

double CostReport::total_wall_ms() const {
  double t = 0.0;
  for (const auto& s : steps) t += s.wall_ms;
  return t;
}

json CostReport::to_json(bool with_time) const {
  json j = {{"steps", steps.size()},
            {"max_peak_activations", max_peak_activations()},
            {"mean_peak_activations", mean_peak_activations()},
            {"max_grad_slots", max_grad_slots()},
            {"max_fusion_slots", max_fusion_slots()}};
  if (with_time) j["total_wall_ms"] = total_wall_ms();
  return j;
}

json EvalReport::to_json() const {
  auto one = [](const ApResult& r) {
    return json{{"iou", r.iou_threshold}, {"ap", r.ap}, {"tp", r.true_positives}, {"fp", r.false_positives},
                {"fn", r.false_negatives}};
  };
  return {{"frames", frames}, {"ap50", one(ap50)}, {"ap70", one(ap70)}};
}

// ---- Trainer ----------------------------------------------------------------

Trainer::Trainer(const TrainConfig& config)
    : config_(config),
      params_(config.model, config.seed),
      controller_(config.controller_config(), &params_),
      adam_(AdamConfig{config.lr, 0.9, 0.999, 1e-8, config.weight_decay}),
      aug_rng_(Rng::derive(config.seed, kAugTag)),
      fusion_rng_(Rng::derive(config.seed, kFusionTag)) {}

StepOutcome Trainer::step(std::span<const dataio::FrameSample> batch, int epoch) {
  if (batch.empty()) throw TrainError("empty batch");
  const auto t0 = std::chrono::steady_clock::now();
  adam_.set_lr(lr_at(epoch, config_.lr, config_.lr_drops, config_.lr_drop_factor));

  ad::Tape tape;
  controller_.begin_step(&tape);
  StepOutcome out;
  std::optional<ad::Tensor> total;
  try {
    for (const auto& frame : batch) {
      controller::StepOptions opt;
      if (config_.augment.enabled) opt.aug = draw_augmentation(aug_rng_, config_.augment);
      opt.rng = &fusion_rng_;
      auto r = controller_.step_frame(frame, agent::Mode::kTrain, opt);
      total = total ? ad::add(*total, r.loss->total) : r.loss->total;
      out.cls += r.loss->cls;
      out.reg += r.loss->reg;
      out.cost.tracked_agents += static_cast<std::int64_t>(r.tracked.size());
      out.results.push_back(std::move(r));
    }
  } catch (...) {
    controller_.begin_step(nullptr);
    throw;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  const ad::Tensor mean = ad::affine(*total, inv);
  out.loss = mean.item();
  out.cls *= inv;
  out.reg *= inv;
  ++step_;
  out.cost.epoch = epoch;
  out.cost.step = step_;
  if (!std::isfinite(out.loss)) {
    controller_.begin_step(nullptr);
    throw TrainError("non-finite loss at step " + std::to_string(step_) + " (epoch " + std::to_string(epoch) +
                     ", lr " + std::to_string(adam_.lr()) + ")");
  }

  const auto grads = tape.backward(mean);
  out.cost.peak_activations = tape.peak_saved_activations();
  out.cost.grad_slots = tape.count_tracked("encoder_output", grads).grad_entries;
  out.cost.fusion_slots = tape.count_tracked("fusion_output", grads).grad_entries;
  const auto pg = param_grads(grads, controller_.tracked_params());
  controller_.begin_step(nullptr);
  adam_.step(params_, pg);
  controller_.set_params(&params_);  // refresh the untracked view
  out.cost.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---- events -----------------------------------------------------------------

std::vector<models::ScoredBox> predictions_of(const controller::FrameResult& result, const TrainConfig& config) {
  if (!result.detections) return {};
  return nms(models::decode(*result.detections, config.model.grid, config.score_threshold), config.nms_iou);
}

FrameEvent make_event(const controller::FrameResult& result, std::int64_t index, std::uint64_t seed,
                      const TrainConfig& config) {
  FrameEvent e;
  e.index = index;
  e.mode = result.mode;
  e.scenario_id = result.scenario_id;
  e.frame = result.frame;
  e.ego = result.ego;
  e.gt = result.gt;
  e.predictions = predictions_of(result, config);
  Rng rng(Rng::derive(Rng::derive(seed, kEventTag), static_cast<std::uint64_t>(index)));
  for (const auto& [id, cloud] : result.points) {
    const auto& pts = cloud.points;
    if (pts.size() <= kMaxEventPoints) {
      e.points.emplace_back(id, pts);
      continue;
    }
    std::vector<std::size_t> idx(pts.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < kMaxEventPoints; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(kMaxEventPoints);
    std::sort(idx.begin(), idx.end());
    std::vector<LidarPoint> sub;
    sub.reserve(idx.size());
    for (auto i : idx) sub.push_back(pts[i]);
    e.points.emplace_back(id, std::move(sub));
  }
  if (result.loss) e.loss = result.loss->total.item();
  return e;
}

// ---- runners ------------------------------------------------------------------

TrainResult train(const TrainConfig& config, RunObserver* observer, std::ostream* log) {
  auto loader = make_loader(config.train_data, config.batch_size, Rng::derive(config.seed, kShuffleTag));
  fs::create_directories(config.out_dir);
  {
    auto os = open_out(config.out_dir / "config.txt");
    os << to_text(config);
  }
  auto metrics = open_out(config.out_dir / "metrics.jsonl");
  auto costs = open_out(config.out_dir / "cost.jsonl");
  auto timing = open_out(config.out_dir / "timing.jsonl");

  Trainer trainer(config);
  TrainResult res;
  std::int64_t event_index = 0;
  for (int epoch = 0; epoch < config.epochs && !res.aborted; ++epoch) {
    loader.reset(static_cast<std::uint64_t>(epoch));
    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr_at(epoch, config.lr, config.lr_drops, config.lr_drop_factor);
    while (auto batch = loader.next()) {
      if (observer && !observer->await_step()) {
        res.aborted = true;
        break;
      }
      auto o = trainer.step(batch->frames, epoch);
      em.loss += o.loss;
      em.cls += o.cls;
      em.reg += o.reg;
      ++em.steps;
      res.cost.steps.push_back(o.cost);
      metrics << json{{"kind", "step"}, {"epoch", epoch}, {"step", o.cost.step}, {"lr", em.lr},
                      {"loss", o.loss}, {"cls", o.cls},   {"reg", o.reg}}
                     .dump()
              << '\n';
      costs << json{{"step", o.cost.step},
                    {"epoch", epoch},
                    {"peak_activations", o.cost.peak_activations},
                    {"grad_slots", o.cost.grad_slots},
                    {"fusion_slots", o.cost.fusion_slots},
                    {"tracked_agents", o.cost.tracked_agents}}
                   .dump()
            << '\n';
      timing << json{{"step", o.cost.step}, {"wall_ms", o.cost.wall_ms}}.dump() << '\n';
      if (observer) {
        auto ev = make_event(o.results.back(), event_index++, config.seed, config);
        ev.epoch = epoch;
        ev.loss = o.loss;
        ev.metrics = {{"loss", o.loss}, {"cls", o.cls}, {"reg", o.reg}, {"lr", em.lr}, {"step", o.cost.step}};
        ev.cost = o.cost;
        observer->on_event(ev);
      }
    }
    if (em.steps > 0) {
      const double n = static_cast<double>(em.steps);
      em.loss /= n;
      em.cls /= n;
      em.reg /= n;
    }
    res.history.push_back(em);
    metrics << json{{"kind", "epoch"}, {"epoch", epoch}, {"lr", em.lr},   {"loss", em.loss},
                    {"cls", em.cls},   {"reg", em.reg},  {"steps", em.steps}}
                   .dump()
            << '\n';
    if (log) *log << "epoch " << epoch << " lr " << em.lr << " loss " << em.loss << " (cls " << em.cls << ", reg " << em.reg << ")\n";
  }
  costs << json{{"kind", "summary"}, {"report", res.cost.to_json()}}.dump() << '\n';
  models::save_checkpoint(config.out_dir / "model.ckpt", trainer.params());
  return res;
}

EvalReport evaluate(const TrainConfig& config, const models::ModelParams& params, RunObserver* observer) {
  auto loader = make_loader(config.test_data, 1, std::nullopt);
  controller::Controller ctl(config.controller_config(), &params);
  Rng rng(Rng::derive(config.seed, kEvalTag));
  std::vector<EvalFrame> frames;
  std::int64_t event_index = 0;
  while (auto batch = loader.next()) {
    if (config.max_frames && frames.size() >= config.max_frames) break;
    if (observer && !observer->await_step()) break;
    controller::StepOptions opt;
    opt.rng = &rng;
    auto r = ctl.step_frame(batch->frames.front(), agent::Mode::kTest, opt);
    EvalFrame ef{predictions_of(r, config), r.gt};
    if (observer) {
      auto ev = make_event(r, event_index++, config.seed, config);
      ev.metrics = {{"frames", frames.size() + 1}};
      observer->on_event(ev);
    }
    frames.push_back(std::move(ef));
  }
  EvalReport rep;
  rep.frames = frames.size();
  rep.ap50 = average_precision(frames, 0.5);
  rep.ap70 = average_precision(frames, 0.7);
  return rep;
}

std::size_t visualize(const TrainConfig& config, RunObserver* observer) {
  const fs::path dir = config.test_data.empty() ? config.train_data : config.test_data;
  auto loader = make_loader(dir, 1, std::nullopt);
  controller::Controller ctl(config.controller_config(), nullptr);
  std::size_t n = 0;
  while (auto batch = loader.next()) {
    if (config.max_frames && n >= config.max_frames) break;
    if (observer && !observer->await_step()) break;
    auto r = ctl.step_frame(batch->frames.front(), agent::Mode::kVis);
    if (observer) {
      auto ev = make_event(r, static_cast<std::int64_t>(n), config.seed, config);
      ev.metrics = {{"frames", n + 1}};
      observer->on_event(ev);
    }
    ++n;
  }
  return n;
}

json run_mode(agent::Mode mode, const TrainConfig& config, RunObserver* observer, std::ostream* log) {
  switch (mode) {
    case agent::Mode::kTrain: {
      auto res = train(config, observer, log);
      json j = {{"mode", "train"},
                {"epochs", res.history.size()},
                {"aborted", res.aborted},
                {"cost", res.cost.to_json(true)},
                {"checkpoint", (config.out_dir / "model.ckpt").string()}};
      if (!res.history.empty()) j["final_loss"] = res.history.back().loss;
      return j;
    }
    case agent::Mode::kTest: {
      const auto params = models::load_checkpoint(config.checkpoint_path(), config.model);
      auto rep = evaluate(config, params, observer);
      json j = rep.to_json();
      j["mode"] = "test";
      j["score_threshold"] = config.score_threshold;
      j["nms_iou"] = config.nms_iou;
      fs::create_directories(config.out_dir);
      auto os = open_out(config.out_dir / "eval.json");
      os << j.dump(2) << '\n';
      if (log) *log << "AP@0.5 " << rep.ap50.ap << "  AP@0.7 " << rep.ap70.ap << " over " << rep.frames << " frames\n";
      return j;
    }
    case agent::Mode::kVis: {
      const auto n = visualize(config, observer);
      return {{"mode", "vis"}, {"frames", n}};
    }
  }
  throw std::invalid_argument("unknown mode");
}

}  // namespace coperc::train
