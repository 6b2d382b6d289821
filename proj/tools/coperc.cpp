// coperc: scenario generation and train/test/vis runs, optionally served to an
// operator over the websocket control protocol.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "coperc/dataio/dataio.hpp"
#include "coperc/scene/scene.hpp"
#include "coperc/service/server.hpp"
#include "coperc/train/runner.hpp"

namespace fs = std::filesystem;
using namespace coperc;

namespace {

struct RunArgs {
  std::string config;
  std::string ngrad;
  std::string fusion;
  std::string serve;
  std::optional<std::uint64_t> seed;
};

// Command-line overrides go through the config parser as trailing lines so
// they get the same validation as the file.
train::TrainConfig resolve_config(const RunArgs& args) {
  std::ifstream is(args.config);
  if (!is) throw std::runtime_error("cannot read config " + args.config);
  std::stringstream text;
  text << is.rdbuf() << "\n";
  if (!args.ngrad.empty()) text << "ngrad = " << args.ngrad << "\n";
  if (!args.fusion.empty()) text << "fusion = " << args.fusion << "\n";
  if (args.seed) text << "seed = " << *args.seed << "\n";
  return train::parse_config(text.str(), fs::absolute(args.config).parent_path());
}

int run(agent::Mode mode, const RunArgs& args) {
  const auto config = resolve_config(args);
  if (args.serve.empty()) {
    auto summary = train::run_mode(mode, config, nullptr, &std::cerr);
    std::cout << summary.dump() << "\n";
    return 0;
  }
  const auto [host, port] = service::parse_address(args.serve);
  service::RunGate gate(mode);
  service::ControlServer server(gate, host, port);
  std::cerr << "serving " << agent::to_string(mode) << " run on " << (host.empty() ? "0.0.0.0" : host) << ":"
            << server.port() << " (paused)\n";
  nlohmann::json summary;
  try {
    summary = train::run_mode(mode, config, &gate, &std::cerr);
  } catch (const std::exception& e) {
    summary = {{"error", e.what()}};
    gate.finish(summary);
    server.shutdown();
    throw;
  }
  gate.finish(summary);
  server.shutdown();
  std::cout << summary.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"collective perception training framework"};
  app.require_subcommand(1);

  std::uint64_t gen_seed = 0;
  std::string gen_out;
  ScenarioConfig gen_cfg;
  int gen_count = 1;
  auto* gen = app.add_subcommand("gen", "generate synthetic scenarios");
  gen->add_option("--seed", gen_seed, "first scenario seed")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--scenarios", gen_count, "number of scenarios (seeds S, S+1, ...)")->check(CLI::PositiveNumber);
  gen->add_option("--frames", gen_cfg.frames, "frames per scenario")->check(CLI::PositiveNumber);
  gen->add_option("--cavs", gen_cfg.n_cavs, "CAVs per scenario")->check(CLI::PositiveNumber);
  gen->add_option("--objects", gen_cfg.n_objects, "non-CAV vehicles per scenario")->check(CLI::NonNegativeNumber);

  RunArgs run_args;
  std::vector<std::pair<agent::Mode, CLI::App*>> runs;
  for (auto mode : {agent::Mode::kTrain, agent::Mode::kTest, agent::Mode::kVis}) {
    auto* sub = app.add_subcommand(agent::to_string(mode), agent::to_string(mode) + " run");
    sub->add_option("--config", run_args.config, "config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--ngrad", run_args.ngrad, "agents with gradients: N or all");
    sub->add_option("--fusion", run_args.fusion, "maxout|naive|attention");
    sub->add_option("--serve", run_args.serve, "host:port for the control protocol (port 0 = any)");
    sub->add_option("--seed", run_args.seed, "run seed");
    runs.emplace_back(mode, sub);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      fs::create_directories(gen_out);
      for (int i = 0; i < gen_count; ++i) {
        const auto scenario = generate_scenario(gen_seed + static_cast<std::uint64_t>(i), gen_cfg);
        const auto meta = dataio::export_scenario(scenario, gen_out);
        std::cout << (fs::path(gen_out) / (meta.scenario_id + ".json")).string() << "\n";
      }
      return 0;
    }
    for (const auto& [mode, sub] : runs) {
      if (sub->parsed()) return run(mode, run_args);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
