#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "coperc/service/protocol.hpp"

namespace coperc::service {

/// The runner side of a served run: blocks the runner between steps and
/// forwards its events. Starts paused.
class RunGate : public train::RunObserver {
 public:
  /// Receives serialized server messages in order; `close` marks the last one.
  using Sink = std::function<void(std::string message, bool close)>;

  explicit RunGate(agent::Mode mode) { status_.mode = mode; }

  bool await_step() override;
  void on_event(const train::FrameEvent& event) override;

  /// Applies a command and returns the resulting status.
  StatusInfo apply(const ControlMessage& msg);
  StatusInfo status() const;

  /// Marks the run finished and emits the terminal status.
  void finish(nlohmann::json summary);
  /// Makes a blocked or future await_step return false.
  void abort();

  void set_sink(Sink sink);

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  StatusInfo status_;
  bool aborted_ = false;
  Sink sink_;
};

/// Websocket endpoint for one operator connection at a time. Each client text
/// frame is one JSON command; every command is answered with a status or an
/// error message, and frame events are pushed as the runner produces them.
class ControlServer {
 public:
  /// Port 0 picks an ephemeral port.
  ControlServer(RunGate& gate, const std::string& host, std::uint16_t port);
  ~ControlServer();
  ControlServer(const ControlServer&) = delete;
  ControlServer& operator=(const ControlServer&) = delete;

  std::uint16_t port() const;
  /// Waits up to `linger` for queued messages to reach the client, then stops.
  void shutdown(std::chrono::milliseconds linger = std::chrono::milliseconds(2000));

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Splits "host:port" (host may be empty for all interfaces).
std::pair<std::string, std::uint16_t> parse_address(const std::string& address);

}  // namespace coperc::service
