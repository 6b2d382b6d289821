#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <unistd.h>

#include "coperc/dataio/dataio.hpp"
#include "coperc/scene/scene.hpp"
#include "coperc/service/server.hpp"
#include "support/ws_client.hpp"

namespace fs = std::filesystem;
using namespace coperc;
using namespace coperc::service;
using coperc::testing::WsClient;
using nlohmann::json;
using namespace std::chrono_literals;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("coperc_service_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void export_set(const fs::path& dir, std::uint64_t first_seed, int n, int frames) {
  ScenarioConfig cfg;
  cfg.frames = frames;
  for (int i = 0; i < n; ++i) dataio::export_scenario(generate_scenario(first_seed + i, cfg), dir);
}

// A runner on its own thread behind a gate and a server on an ephemeral port.
struct ServedRun {
  RunGate gate;
  ControlServer server;
  std::thread runner;
  json summary;

  ServedRun(agent::Mode mode, train::TrainConfig cfg) : gate(mode), server(gate, "127.0.0.1", 0) {
    runner = std::thread([this, mode, cfg] {
      summary = train::run_mode(mode, cfg, &gate);
      gate.finish(summary);
    });
  }
  ~ServedRun() {
    gate.abort();
    if (runner.joinable()) runner.join();
    server.shutdown(500ms);
  }
  void wait() {
    if (runner.joinable()) runner.join();
  }
};

json cmd(const std::string& kind) { return {{"v", 1}, {"kind", kind}}; }
json step(int n) { return {{"v", 1}, {"kind", "step"}, {"count", n}}; }

}  // namespace

TEST_CASE("control messages parse and reject malformed input") {
  CHECK(parse_control(R"({"v":1,"kind":"start"})").kind == CommandKind::kStart);
  auto s = parse_control(R"({"v":1,"kind":"step","count":5})");
  CHECK(s.kind == CommandKind::kStep);
  CHECK(s.count == 5);
  CHECK(parse_control(R"({"v":1,"kind":"step"})").count == 1);
  CHECK(parse_control(to_json(s).dump()).count == 5);

  for (const char* bad : {"nope", "[1]", R"({"kind":"start"})", R"({"v":2,"kind":"start"})", R"({"v":"1","kind":"start"})",
                          R"({"v":1,"kind":"jump"})", R"({"v":1})", R"({"v":1,"kind":"step","count":0})",
                          R"({"v":1,"kind":"step","count":1.5})", R"({"v":1,"kind":"start","count":2})"}) {
    CAPTURE(bad);
    CHECK_THROWS_AS(parse_control(bad), ProtocolError);
  }
}

TEST_CASE("address parsing") {
  CHECK(parse_address("127.0.0.1:8080") == std::pair<std::string, std::uint16_t>{"127.0.0.1", 8080});
  CHECK(parse_address(":0").first.empty());
  CHECK_THROWS(parse_address("localhost"));
  CHECK_THROWS(parse_address("h:70000"));
  CHECK_THROWS(parse_address("h:8x"));
}

TEST_CASE("served vis run: stepping, start/stop, errors and terminal status") {
  TempDir tmp("vis");
  export_set(tmp.path / "data", 700, 5, 2);
  train::TrainConfig cfg;
  cfg.test_data = tmp.path / "data";
  cfg.out_dir = tmp.path / "out";

  ServedRun run(agent::Mode::kVis, cfg);
  WsClient client(run.server.port());

  // paused until told otherwise
  client.send(cmd("status"));
  auto st = client.recv_kind("status");
  REQUIRE(st);
  CHECK((*st)["v"] == 1);
  CHECK((*st)["state"] == "paused");
  CHECK((*st)["mode"] == "vis");
  CHECK((*st)["frame_index"] == -1);
  CHECK(!client.recv(200ms));

  SUBCASE("one step yields exactly one event") {
    client.send(step(1));
    auto ev = client.recv_kind("frame");
    REQUIRE(ev);
    CHECK((*ev)["index"] == 0);
    CHECK((*ev)["mode"] == "vis");
    CHECK((*ev)["points"].is_array());
    CHECK(!(*ev)["points"].empty());
    CHECK((*ev)["gt"].is_array());
    CHECK((*ev)["loss"].is_null());
    CHECK(!client.recv_kind("frame", 300ms));
    client.send(cmd("status"));
    st = client.recv_kind("status");
    REQUIRE(st);
    CHECK((*st)["frame_index"] == 0);
    CHECK((*st)["pending_steps"] == 0);
  }

  SUBCASE("step count 5 yields five events in order") {
    client.send(step(5));
    for (int i = 0; i < 5; ++i) {
      auto ev = client.recv_kind("frame");
      REQUIRE(ev);
      CHECK((*ev)["index"] == i);
    }
    CHECK(!client.recv_kind("frame", 300ms));
  }

  SUBCASE("malformed commands get an error and the connection stays usable") {
    client.send_text("{not json");
    auto err = client.recv();
    REQUIRE(err);
    CHECK((*err)["kind"] == "error");
    CHECK((*err)["v"] == 1);
    client.send(json{{"v", 1}, {"kind", "step"}, {"count", -3}});
    err = client.recv();
    REQUIRE(err);
    CHECK((*err)["kind"] == "error");
    client.send(cmd("status"));
    st = client.recv();
    REQUIRE(st);
    CHECK((*st)["kind"] == "status");
    CHECK(!client.closed());
  }

  SUBCASE("start then stop pauses the run") {
    client.send(cmd("start"));
    st = client.recv_kind("status");
    REQUIRE(st);
    CHECK((*st)["state"] == "running");
    client.send(cmd("stop"));
    st = client.recv_kind("status");
    REQUIRE(st);
    CHECK((*st)["state"] == "paused");
    // drain in-flight events; the run stays put afterwards
    while (client.recv_kind("frame", 300ms)) {
    }
    client.send(cmd("status"));
    auto a = client.recv_kind("status");
    REQUIRE(a);
    CHECK(!client.recv_kind("frame", 300ms));
    client.send(cmd("status"));
    auto b = client.recv_kind("status");
    REQUIRE(b);
    CHECK((*a)["frame_index"] == (*b)["frame_index"]);
    CHECK((*b)["state"] == "paused");
  }

  SUBCASE("running to the end sends a terminal status and closes") {
    client.send(cmd("start"));
    int frames = 0;
    std::optional<json> terminal;
    while (auto m = client.recv(5000ms)) {
      if ((*m)["kind"] == "frame") ++frames;
      if ((*m)["kind"] == "status" && (*m)["terminal"] == true) {
        terminal = m;
        break;
      }
    }
    REQUIRE(terminal);
    CHECK((*terminal)["state"] == "finished");
    CHECK((*terminal)["summary"].is_object());
    CHECK(frames == (*terminal)["frame_index"].get<int>() + 1);
    for (int i = 0; i < 50 && !client.closed(); ++i) std::this_thread::sleep_for(20ms);
    CHECK(client.closed());
    run.wait();
  }
}

TEST_CASE("a second operator connection is refused") {
  TempDir tmp("second");
  export_set(tmp.path / "data", 710, 1, 2);
  train::TrainConfig cfg;
  cfg.test_data = tmp.path / "data";
  ServedRun run(agent::Mode::kVis, cfg);
  WsClient first(run.server.port());
  first.send(cmd("status"));
  REQUIRE(first.recv_kind("status"));
  CHECK_THROWS(WsClient(run.server.port()));
  first.send(cmd("status"));
  CHECK(first.recv_kind("status"));
}

TEST_CASE("served training idles while paused and matches an unserved run once started") {
  TempDir tmp("train");
  export_set(tmp.path / "train", 720, 2, 2);
  auto base = train::parse_config("epochs = 1\nngrad = 1\ntrain_data = train\n", tmp.path);

  auto plain = base;
  plain.out_dir = tmp.path / "plain";
  train::train(plain);

  auto served = base;
  served.out_dir = tmp.path / "served";
  ServedRun run(agent::Mode::kTrain, served);
  WsClient client(run.server.port());

  std::this_thread::sleep_for(300ms);
  client.send(cmd("status"));
  auto st = client.recv_kind("status");
  REQUIRE(st);
  CHECK((*st)["state"] == "paused");
  CHECK((*st)["frame_index"] == -1);
  CHECK(!client.recv_kind("frame", 200ms));

  client.send(step(1));
  auto ev = client.recv_kind("frame");
  REQUIRE(ev);
  CHECK((*ev)["mode"] == "train");
  CHECK((*ev)["loss"].is_number());
  CHECK((*ev)["cost"].is_object());

  client.send(cmd("start"));
  std::optional<json> terminal;
  while (auto m = client.recv(20000ms)) {
    if ((*m)["kind"] == "status" && (*m)["terminal"] == true) {
      terminal = m;
      break;
    }
  }
  REQUIRE(terminal);
  run.wait();
  CHECK(slurp(plain.out_dir / "metrics.jsonl") == slurp(served.out_dir / "metrics.jsonl"));
  CHECK(slurp(plain.out_dir / "cost.jsonl") == slurp(served.out_dir / "cost.jsonl"));
  CHECK(slurp(plain.out_dir / "model.ckpt") == slurp(served.out_dir / "model.ckpt"));
}
