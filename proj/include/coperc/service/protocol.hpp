#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "coperc/train/runner.hpp"

namespace coperc::service {

/// Carried as "v" in every message, both directions.
inline constexpr int kProtocolVersion = 1;

class ProtocolError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class CommandKind { kStart, kStop, kStep, kStatus };

struct ControlMessage {
  CommandKind kind = CommandKind::kStatus;
  std::int64_t count = 1;  // step only
};

/// Parses one client text frame; throws ProtocolError on anything malformed.
ControlMessage parse_control(const std::string& text);
nlohmann::json to_json(const ControlMessage& msg);

enum class RunState { kPaused, kRunning, kFinished };
std::string to_string(RunState state);

struct StatusInfo {
  agent::Mode mode = agent::Mode::kVis;
  RunState state = RunState::kPaused;
  std::int64_t frame_index = -1;  // last event index, -1 before the first
  std::int64_t pending_steps = 0;
  bool terminal = false;
  nlohmann::json summary;  // terminal only
};

nlohmann::json status_json(const StatusInfo& status);
nlohmann::json event_json(const train::FrameEvent& event);
nlohmann::json error_json(const std::string& message);

}  // namespace coperc::service
