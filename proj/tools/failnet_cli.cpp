// SPDX-License-Identifier: Apache-2.0
// Command-line front end: generate | train | evaluate | serve | replay | grad-check.
#include <atomic>
#include <chrono>
#include <csignal>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "failnet/workflow.hpp"

using namespace failnet;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kAcceptance = 3;

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void log_line(const std::string& msg) { std::cerr << "[failnet] " << msg << std::endl; }

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  bool force = false;
  std::vector<std::string> sets;

  config::RunConfig load() const {
    auto overrides = sets;
    if (seed) overrides.push_back("run.seed=" + std::to_string(*seed));
    try {
      return config::load_config(config_path, overrides);
    } catch (const config::ConfigError&) {
      throw;
    } catch (const InvalidInput& e) {
      throw config::ConfigError(e.what());
    }
  }
};

int cmd_generate(const Options& o) {
  const auto cfg = o.load();
  const auto s = workflow::run_generate(cfg, {o.out}, o.force, log_line);
  for (const auto& [mode, n] : s.counts) std::cout << mode_name(mode) << ' ' << n << '\n';
  std::cout << "total " << s.windows << " windows from " << s.logs << " logs\n";
  return kOk;
}

int cmd_grad_check(const Options& o) {
  const auto s = workflow::run_grad_check(o.load());
  std::cout << workflow::format_grad_check(s);
  return s.pass ? kOk : kAcceptance;
}

int cmd_train(const Options& o) {
  const auto cfg = o.load();
  const workflow::RunDir dir{o.out};
  // Fail on a missing dataset before spending time on the gradient check.
  workflow::load_split(cfg, dir);
  if (cfg.grad_check_before_train) {
    const auto s = workflow::run_grad_check(cfg);
    std::cout << workflow::format_grad_check(s);
    if (!s.pass) {
      log_line("gradient check failed; not training");
      return kAcceptance;
    }
  }
  workflow::run_train(cfg, dir, log_line);
  return kOk;
}

int cmd_evaluate(const Options& o) {
  const auto r = workflow::run_evaluate(o.load(), {o.out}, log_line);
  std::cout << eval::format_table(r.report) << '\n' << workflow::format_checks(r.checks);
  return r.pass() ? kOk : kAcceptance;
}

int cmd_replay(const Options& o) {
  const auto r = workflow::run_replay(o.load(), {o.out}, log_line);
  std::cout << eval::format_table(r.report) << '\n' << workflow::format_checks(r.checks);
  return r.pass() ? kOk : kAcceptance;
}

int cmd_serve(const Options& o) {
  auto cfg = o.load();
  const workflow::RunDir dir{o.out};
  cfg.manager.checkpoint = workflow::serve_checkpoint(cfg, dir, log_line);
  auto det = manager::load_detector(cfg.manager.checkpoint);
  manager::Server server(cfg.manager, std::move(det));
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  server.start();
  std::cout << "listening on " << cfg.manager.host << ':' << server.port() << " with " << cfg.manager.checkpoint
            << std::endl;
  using clock = std::chrono::steady_clock;
  auto next_beat = clock::now() + std::chrono::duration<double>(cfg.manager.heartbeat_seconds);
  while (!g_stop && server.running()) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    if (clock::now() >= next_beat) {
      server.heartbeat();
      next_beat += std::chrono::duration<double>(cfg.manager.heartbeat_seconds);
    }
  }
  server.stop();
  std::cout << "stopped after " << server.evaluation_count() << " evaluations" << std::endl;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"failnet: failure detection for autonomous vehicles from external pose observations"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config_path, "INI configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Master seed (overrides run.seed)");
  app.add_option("--out", o.out, "Run directory")->capture_default_str();
  app.add_flag("--force", o.force, "Overwrite existing generated data");
  app.add_option("--set", o.sets, "Override one key, section.key=value (repeatable)");

  struct Sub {
    const char* name;
    const char* help;
    int (*fn)(const Options&);
  };
  const Sub subs[] = {
      {"generate", "Simulate drives and write the windowed dataset", cmd_generate},
      {"train", "Train every method in the roster", cmd_train},
      {"evaluate", "Score methods on the validation split and check the orderings", cmd_evaluate},
      {"serve", "Run the intersection manager over TCP", cmd_serve},
      {"replay", "Closed-loop replay of every failure mode against the manager", cmd_replay},
      {"grad-check", "Compare analytic and finite-difference gradients", cmd_grad_check},
  };
  int (*chosen)(const Options&) = nullptr;
  for (const auto& s : subs) app.add_subcommand(s.name, s.help)->callback([&chosen, fn = s.fn] { chosen = fn; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    return chosen(o);
  } catch (const config::ConfigError& e) {
    log_line(std::string("config error: ") + e.what());
    return kUsage;
  } catch (const workflow::OutputExists& e) {
    log_line(e.what());
    return kUsage;
  } catch (const manager::ProtocolError& e) {
    log_line(e.what());
    return kData;
  } catch (const InvalidInput& e) {
    log_line(std::string("invalid input: ") + e.what());
    return kData;
  } catch (const FormatError& e) {
    log_line(std::string("data error: ") + e.what());
    return kData;
  } catch (const std::exception& e) {
    log_line(std::string("error: ") + e.what());
    return kData;
  }
}
