#pragma once

// Minimal websocket client for protocol tests: one io thread runs an async
// read loop into a queue; sends are posted to the same thread.

#include <chrono>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <nlohmann/json.hpp>

namespace coperc::testing {

class WsClient {
 public:
  explicit WsClient(std::uint16_t port, const std::string& host = "127.0.0.1") : ws_(ioc_) {
    namespace asio = boost::asio;
    asio::ip::tcp::resolver resolver(ioc_);
    auto results = resolver.resolve(host, std::to_string(port));
    boost::beast::get_lowest_layer(ws_).connect(results);
    ws_.handshake(host, "/");
    ws_.text(true);
    read();
    thread_ = std::thread([this] { ioc_.run(); });
  }

  ~WsClient() {
    boost::asio::post(ioc_, [this] {
      boost::beast::error_code ec;
      boost::beast::get_lowest_layer(ws_).socket().close(ec);
    });
    ioc_.stop();
    if (thread_.joinable()) thread_.join();
  }

  void send(const nlohmann::json& j) { send_text(j.dump()); }

  void send_text(std::string text) {
    boost::asio::post(ioc_, [this, text = std::move(text)]() mutable {
      out_.push_back(std::move(text));
      if (!writing_) write();
    });
  }

  /// Next message, or nullopt after `timeout` with nothing received.
  std::optional<nlohmann::json> recv(std::chrono::milliseconds timeout = std::chrono::milliseconds(5000)) {
    std::unique_lock lock(mu_);
    if (!cv_.wait_for(lock, timeout, [&] { return !in_.empty(); })) return std::nullopt;
    auto j = nlohmann::json::parse(in_.front());
    in_.pop_front();
    return j;
  }

  /// Next message of the given kind, skipping others.
  std::optional<nlohmann::json> recv_kind(const std::string& kind,
                                          std::chrono::milliseconds timeout = std::chrono::milliseconds(5000)) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) return std::nullopt;
      auto m = recv(left);
      if (!m) return std::nullopt;
      if ((*m)["kind"] == kind) return m;
    }
  }

  bool closed() const {
    std::lock_guard lock(mu_);
    return closed_;
  }

 private:
  void read() {
    ws_.async_read(buf_, [this](boost::beast::error_code ec, std::size_t) {
      if (ec) {
        std::lock_guard lock(mu_);
        closed_ = true;
        cv_.notify_all();
        return;
      }
      {
        std::lock_guard lock(mu_);
        in_.push_back(boost::beast::buffers_to_string(buf_.data()));
        cv_.notify_all();
      }
      buf_.consume(buf_.size());
      read();
    });
  }

  void write() {
    writing_ = true;
    ws_.async_write(boost::asio::buffer(out_.front()), [this](boost::beast::error_code ec, std::size_t) {
      writing_ = false;
      if (ec) return;
      out_.pop_front();
      if (!out_.empty()) write();
    });
  }

  boost::asio::io_context ioc_;
  boost::beast::websocket::stream<boost::beast::tcp_stream> ws_;
  boost::beast::flat_buffer buf_;
  std::deque<std::string> out_;
  bool writing_ = false;
  std::thread thread_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::string> in_;
  bool closed_ = false;
};

}  // namespace coperc::testing
