#include "coperc/service/protocol.hpp"

using nlohmann::json;

namespace coperc::service {
namespace {

json box_json(const ObjectBox& b) {
  return {{"id", b.id}, {"x", b.center.x}, {"y", b.center.y}, {"length", b.length}, {"width", b.width}, {"yaw", b.yaw}};
}

}  // namespace

ControlMessage parse_control(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ProtocolError(std::string("not JSON: ") + e.what());
  }
  if (!j.is_object()) throw ProtocolError("message must be a JSON object");
  if (!j.contains("v") || !j["v"].is_number_integer()) throw ProtocolError("missing protocol version \"v\"");
  if (j["v"].get<int>() != kProtocolVersion) {
    throw ProtocolError("unsupported protocol version " + j["v"].dump());
  }
  if (!j.contains("kind") || !j["kind"].is_string()) throw ProtocolError("missing \"kind\"");
  const auto kind = j["kind"].get<std::string>();
  ControlMessage m;
  if (kind == "start") m.kind = CommandKind::kStart;
  else if (kind == "stop") m.kind = CommandKind::kStop;
  else if (kind == "step") m.kind = CommandKind::kStep;
  else if (kind == "status") m.kind = CommandKind::kStatus;
  else throw ProtocolError("unknown kind '" + kind + "'");
  if (j.contains("count")) {
    if (m.kind != CommandKind::kStep) throw ProtocolError("\"count\" is only valid for step");
    if (!j["count"].is_number_integer() || j["count"].get<std::int64_t>() < 1) {
      throw ProtocolError("step count must be an integer >= 1");
    }
    m.count = j["count"].get<std::int64_t>();
  }
  return m;
}

json to_json(const ControlMessage& msg) {
  static const char* names[] = {"start", "stop", "step", "status"};
  json j = {{"v", kProtocolVersion}, {"kind", names[static_cast<int>(msg.kind)]}};
  if (msg.kind == CommandKind::kStep) j["count"] = msg.count;
  return j;
}

std::string to_string(RunState state) {
  switch (state) {
    case RunState::kPaused: return "paused";
    case RunState::kRunning: return "running";
    case RunState::kFinished: return "finished";
  }
  return "?";
}

json status_json(const StatusInfo& s) {
  json j = {{"v", kProtocolVersion},
            {"kind", "status"},
            {"mode", agent::to_string(s.mode)},
            {"state", to_string(s.state)},
            {"frame_index", s.frame_index},
            {"pending_steps", s.pending_steps},
            {"terminal", s.terminal}};
  if (s.terminal) j["summary"] = s.summary;
  return j;
}

json event_json(const train::FrameEvent& e) {
  json points = json::array();
  for (const auto& [id, pts] : e.points) {
    json xyz = json::array();
    for (const auto& p : pts) xyz.push_back({p.x, p.y, p.intensity});
    points.push_back({{"cav", id}, {"points", std::move(xyz)}});
  }
  json gt = json::array();
  for (const auto& b : e.gt) gt.push_back(box_json(b));
  json pred = json::array();
  for (const auto& p : e.predictions) {
    auto b = box_json(p.box);
    b.erase("id");
    b["score"] = p.score;
    pred.push_back(std::move(b));
  }
  json j = {{"v", kProtocolVersion},
            {"kind", "frame"},
            {"index", e.index},
            {"mode", agent::to_string(e.mode)},
            {"scenario_id", e.scenario_id},
            {"frame", e.frame},
            {"epoch", e.epoch},
            {"ego", e.ego},
            {"points", std::move(points)},
            {"gt", std::move(gt)},
            {"predictions", std::move(pred)},
            {"loss", e.loss ? json(*e.loss) : json(nullptr)},
            {"metrics", e.metrics}};
  if (e.cost) {
    j["cost"] = {{"step", e.cost->step},
                 {"peak_activations", e.cost->peak_activations},
                 {"grad_slots", e.cost->grad_slots},
                 {"fusion_slots", e.cost->fusion_slots},
                 {"tracked_agents", e.cost->tracked_agents},
                 {"wall_ms", e.cost->wall_ms}};
  } else {
    j["cost"] = nullptr;
  }
  return j;
}

json error_json(const std::string& message) {
  return {{"v", kProtocolVersion}, {"kind", "error"}, {"message", message}};
}

}  // namespace coperc::service
