#include "coperc/service/server.hpp"

#include <atomic>
#include <deque>
#include <future>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

namespace coperc::service {

// ---- RunGate ----------------------------------------------------------------

bool RunGate::await_step() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return aborted_ || status_.state == RunState::kRunning || status_.pending_steps > 0; });
  if (aborted_) return false;
  if (status_.state != RunState::kRunning) --status_.pending_steps;
  return true;
}

void RunGate::on_event(const train::FrameEvent& event) {
  std::lock_guard lock(mu_);
  status_.frame_index = event.index;
  if (sink_) sink_(event_json(event).dump(), false);
}

StatusInfo RunGate::apply(const ControlMessage& msg) {
  std::lock_guard lock(mu_);
  if (status_.state != RunState::kFinished) {
    switch (msg.kind) {
      case CommandKind::kStart:
        status_.state = RunState::kRunning;
        status_.pending_steps = 0;
        break;
      case CommandKind::kStop:
        status_.state = RunState::kPaused;
        status_.pending_steps = 0;
        break;
      case CommandKind::kStep:
        if (status_.state == RunState::kPaused) status_.pending_steps += msg.count;
        break;
      case CommandKind::kStatus:
        break;
    }
  }
  cv_.notify_all();
  return status_;
}

StatusInfo RunGate::status() const {
  std::lock_guard lock(mu_);
  return status_;
}

void RunGate::finish(nlohmann::json summary) {
  std::lock_guard lock(mu_);
  status_.state = RunState::kFinished;
  status_.pending_steps = 0;
  status_.terminal = true;
  status_.summary = std::move(summary);
  if (sink_) sink_(status_json(status_).dump(), true);
  cv_.notify_all();
}

void RunGate::abort() {
  std::lock_guard lock(mu_);
  aborted_ = true;
  cv_.notify_all();
}

void RunGate::set_sink(Sink sink) {
  std::lock_guard lock(mu_);
  sink_ = std::move(sink);
}

// ---- ControlServer ------------------------------------------------------------

namespace {

class Session : public std::enable_shared_from_this<Session> {
 public:
  Session(tcp::socket socket, RunGate& gate, std::function<void()> on_close)
      : ws_(std::move(socket)), gate_(gate), on_close_(std::move(on_close)) {}

  void run() {
    ws_.text(true);
    ws_.async_accept([self = shared_from_this()](beast::error_code ec) {
      if (ec) return self->close_now();
      self->open_ = true;
      self->read();
      self->flush();
    });
  }

  void send(std::string msg, bool close) {
    if (closing_) return;
    out_.push_back(std::move(msg));
    if (close) close_after_ = true;
    flush();
  }

  bool idle() const { return out_.empty() && !writing_ && (!close_after_ || done_); }

 private:
  void read() {
    ws_.async_read(buf_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->close_now();
      const std::string text = beast::buffers_to_string(self->buf_.data());
      self->buf_.consume(self->buf_.size());
      std::string reply;
      try {
        reply = status_json(self->gate_.apply(parse_control(text))).dump();
      } catch (const ProtocolError& e) {
        reply = error_json(e.what()).dump();
      }
      self->send(std::move(reply), false);
      self->read();
    });
  }

  void flush() {
    if (!open_ || writing_) return;
    if (out_.empty()) {
      if (close_after_ && !closing_) {
        closing_ = true;
        ws_.async_close(websocket::close_code::normal,
                        [self = shared_from_this()](beast::error_code) { self->close_now(); });
      }
      return;
    }
    writing_ = true;
    ws_.async_write(asio::buffer(out_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      self->writing_ = false;
      if (ec) return self->close_now();
      self->out_.pop_front();
      self->flush();
    });
  }

  void close_now() {
    if (done_) return;
    done_ = true;
    out_.clear();
    beast::error_code ignored;
    beast::get_lowest_layer(ws_).socket().close(ignored);
    if (on_close_) on_close_();
  }

  websocket::stream<beast::tcp_stream> ws_;
  RunGate& gate_;
  std::function<void()> on_close_;
  beast::flat_buffer buf_;
  std::deque<std::string> out_;
  bool open_ = false, writing_ = false, close_after_ = false, closing_ = false, done_ = false;
};

}  // namespace

struct ControlServer::Impl {
  asio::io_context ioc;
  tcp::acceptor acceptor{ioc};
  RunGate& gate;
  std::shared_ptr<Session> session;
  std::thread thread;
  std::atomic<bool> stopped{false};

  explicit Impl(RunGate& g) : gate(g) {}

  void accept() {
    acceptor.async_accept([this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      if (session) {
        // one operator at a time
        beast::error_code ignored;
        socket.close(ignored);
      } else {
        auto s = std::make_shared<Session>(std::move(socket), gate, [this] { session.reset(); });
        session = s;
        s->run();
      }
      accept();
    });
  }
};

ControlServer::ControlServer(RunGate& gate, const std::string& host, std::uint16_t port)
    : impl_(std::make_unique<Impl>(gate)) {
  const auto addr = host.empty() ? asio::ip::address_v4::any() : asio::ip::make_address(host);
  tcp::endpoint ep(addr, port);
  impl_->acceptor.open(ep.protocol());
  impl_->acceptor.set_option(asio::socket_base::reuse_address(true));
  impl_->acceptor.bind(ep);
  impl_->acceptor.listen();
  gate.set_sink([impl = impl_.get()](std::string msg, bool close) {
    asio::post(impl->ioc, [impl, msg = std::move(msg), close]() mutable {
      if (impl->session) impl->session->send(std::move(msg), close);
    });
  });
  impl_->accept();
  impl_->thread = std::thread([impl = impl_.get()] { impl->ioc.run(); });
}

ControlServer::~ControlServer() { shutdown(std::chrono::milliseconds(0)); }

std::uint16_t ControlServer::port() const { return impl_->acceptor.local_endpoint().port(); }

void ControlServer::shutdown(std::chrono::milliseconds linger) {
  if (impl_->stopped.exchange(true)) return;
  impl_->gate.set_sink(nullptr);
  const auto deadline = std::chrono::steady_clock::now() + linger;
  while (std::chrono::steady_clock::now() < deadline) {
    auto idle = std::make_shared<std::promise<bool>>();
    auto f = idle->get_future();
    asio::post(impl_->ioc, [idle, impl = impl_.get()] { idle->set_value(!impl->session || impl->session->idle()); });
    if (f.wait_for(std::chrono::milliseconds(200)) == std::future_status::ready && f.get()) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  impl_->ioc.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::pair<std::string, std::uint16_t> parse_address(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) throw std::invalid_argument("address must be host:port, got '" + address + "'");
  const std::string host = address.substr(0, colon);
  const std::string port = address.substr(colon + 1);
  int p = 0;
  try {
    std::size_t used = 0;
    p = std::stoi(port, &used);
    if (used != port.size()) throw std::invalid_argument("");
  } catch (const std::exception&) {
    throw std::invalid_argument("bad port in '" + address + "'");
  }
  if (p < 0 || p > 65535) throw std::invalid_argument("port out of range in '" + address + "'");
  return {host, static_cast<std::uint16_t>(p)};
}

}  // namespace coperc::service
