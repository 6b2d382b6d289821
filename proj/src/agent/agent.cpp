#include "coperc/agent/agent.hpp"

#include <algorithm>
#include <stdexcept>

namespace coperc::agent {

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::kTrain: return "train";
    case Mode::kTest: return "test";
    case Mode::kVis: return "vis";
  }
  return "?";
}

Mode parse_mode(const std::string& text) {
  if (text == "train") return Mode::kTrain;
  if (text == "test") return Mode::kTest;
  if (text == "vis") return Mode::kVis;
  throw std::invalid_argument("unknown mode '" + text + "' (expected train, test or vis)");
}

std::string SlotKey::str() const {
  return "cav" + std::to_string(agent) + "/stage" + std::to_string(stage) + "/" + slot;
}

std::vector<CavState> neighbors(std::span<const CavState> cavs, const CavState& ego, double range, std::size_t cap) {
  if (!(range > 0.0)) throw std::invalid_argument("communication range must be positive");
  std::vector<std::pair<double, const CavState*>> near;
  for (const auto& c : cavs) {
    if (c.id == ego.id) continue;
    const double d = distance(c.pose, ego.pose);
    if (d < range) near.emplace_back(d, &c);
  }
  std::sort(near.begin(), near.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : a.second->id < b.second->id;
  });
  if (near.size() > cap) near.resize(cap);
  std::vector<CavState> out;
  for (const auto& n : near) out.push_back(*n.second);
  return out;
}

std::vector<Task> cav_pipeline(const CavState& s, int st, const PipelineContext& ctx) {
  const bool train = ctx.mode == Mode::kTrain;
  switch (st) {
    case stage::kPreprocess:
      return {Task{s.id, "preprocess", false, {{s.id, stage::kInput, "cloud"}}, st, {s.id, st, "pillars"}}};
    case stage::kEncode:
      if (ctx.mode == Mode::kVis) return {};
      return {Task{s.id, "encoder", s.tracked, {{s.id, stage::kPreprocess, "pillars"}}, st, {s.id, st, "bev"}}};
    case stage::kShare:
      if (ctx.mode == Mode::kVis || s.is_ego) return {};
      return {Task{s.id, "share", false, {{s.id, stage::kEncode, "bev"}}, st,
                   {ctx.ego, st, "cpm." + std::to_string(s.id)}}};
    case stage::kFuse: {
      if (ctx.mode == Mode::kVis || !s.is_ego) return {};
      Task t{s.id, "fusion", train, {{s.id, stage::kEncode, "bev"}}, st, {s.id, st, "fused"}};
      for (CavId c : ctx.cooperators) t.inputs.push_back({s.id, stage::kShare, "cpm." + std::to_string(c)});
      return {t};
    }
    case stage::kHead:
      if (ctx.mode == Mode::kVis || !s.is_ego) return {};
      return {Task{s.id, "head", train, {{s.id, stage::kFuse, "fused"}}, st, {s.id, st, "detections"}}};
    default:
      return {};
  }
}

}  // namespace coperc::agent
