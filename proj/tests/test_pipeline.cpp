// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <sstream>

#include "doctest.h"
#include "failnet/config.hpp"
#include "failnet/pipeline.hpp"

using namespace failnet;
using pipeline::Method;

namespace {

// Builds a result whose per-mode accuracies are exactly the given fractions of 100 windows.
eval::MethodResult synthetic(Method m, const std::map<FailureMode, int>& correct_per_100) {
  std::vector<double> preds;
  std::vector<FailureMode> modes;
  for (auto [mode, k] : correct_per_100)
    for (int i = 0; i < 100; ++i) {
      const bool unsafe = mode != FailureMode::Nominal;
      const bool right = i < k;
      preds.push_back((unsafe == right) ? 0.9 : 0.1);
      modes.push_back(mode);
    }
  return eval::score_method(std::string(pipeline::method_name(m)), 0, preds, modes);
}

std::map<FailureMode, int> uniform_modes(int k) {
  std::map<FailureMode, int> out;
  for (FailureMode m : kAllModes) out[m] = k;
  return out;
}

const pipeline::Check* find_check(const std::vector<pipeline::Check>& cs, const std::string& prefix) {
  for (const auto& c : cs)
    if (c.name.rfind(prefix, 0) == 0) return &c;
  FAIL("no check named " << prefix);
  return nullptr;
}

}  // namespace

TEST_CASE("grad-check suite covers every learned model within budget") {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = pipeline::run_grad_checks(10, 1e-5, 7);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  REQUIRE(results.size() == 40);
  std::map<std::string, int> seen;
  for (const auto& r : results) {
    INFO(r.model << " seed " << r.seed << " err " << r.max_rel_error);
    // Probes whose gradient sits near the 1e-8 denominator floor are roundoff-limited at eps 1e-5.
    CHECK(r.max_rel_error < 1e-2);
    ++seen[r.model];
  }
  CHECK(seen.size() == 4);
  CHECK(results[0].parameters == 8129);
  CHECK(secs < 30.0);
}

TEST_CASE("accuracy checks on a report with the expected signatures") {
  eval::EvalReport rep;
  rep.methods.push_back(synthetic(Method::SpeedThreshold, {{FailureMode::Nominal, 90},
                                                           {FailureMode::Speeding, 100},
                                                           {FailureMode::LaneShift, 20}}));
  rep.methods.push_back(synthetic(Method::FftThreshold, uniform_modes(55)));
  rep.methods.push_back(synthetic(Method::Kalman, {{FailureMode::Nominal, 40},
                                                   {FailureMode::PeriodicControl, 80},
                                                   {FailureMode::LaneShift, 75},
                                                   {FailureMode::Speeding, 90},
                                                   {FailureMode::Reckless, 70}}));
  rep.methods.push_back(synthetic(Method::Mlp, uniform_modes(92)));
  rep.methods.push_back(synthetic(Method::FftMlp, uniform_modes(80)));
  rep.methods.push_back(synthetic(Method::Lstm, uniform_modes(95)));
  rep.methods.push_back(synthetic(Method::Gru, uniform_modes(91)));
  rep.methods.push_back(synthetic(Method::Cfc, uniform_modes(97)));

  const auto acc = pipeline::accuracy_checks(rep);
  for (const auto& c : acc) {
    INFO(c.name << ": " << c.detail);
    CHECK(c.pass);
  }
  CHECK(acc.size() == 7);
  for (const auto& c : pipeline::ordering_checks(rep)) CHECK(c.pass);
  CHECK(pipeline::best_rnn(rep) == Method::Cfc);

  rep.methods[2] = synthetic(Method::Kalman, {{FailureMode::Nominal, 100}, {FailureMode::LaneShift, 0}});
  rep.methods[1] = synthetic(Method::FftThreshold, uniform_modes(85));
  rep.methods[6] = synthetic(Method::Gru, uniform_modes(89));
  const auto bad = pipeline::accuracy_checks(rep);
  CHECK_FALSE(find_check(bad, "Kalman")->pass);
  CHECK_FALSE(find_check(bad, "FFT threshold below")->pass);
  CHECK_FALSE(find_check(bad, "FailureNet-GRU")->pass);
  CHECK(find_check(bad, "FailureNet-LSTM")->pass);
}

TEST_CASE("accuracy checks skip methods absent from the report") {
  eval::EvalReport rep;
  rep.methods.push_back(synthetic(Method::Lstm, uniform_modes(95)));
  const auto acc = pipeline::accuracy_checks(rep);
  REQUIRE(acc.size() == 1);
  CHECK(acc[0].pass);
  CHECK(pipeline::best_rnn(eval::EvalReport{}) == std::nullopt);
}

TEST_CASE("config rejects unknown keys and keys outside sections") {
  std::istringstream typo("[sim]\na_delat = 0.3\n");
  CHECK_THROWS_AS(config::parse_config(typo, {}), config::ConfigError);
  std::istringstream bare("seed = 3\n");
  CHECK_THROWS_AS(config::parse_config(bare, {}), config::ConfigError);
  std::istringstream empty;
  CHECK_THROWS_AS(config::parse_config(empty, {"train.epoch=3"}), config::ConfigError);
  CHECK_THROWS_AS(config::parse_config(empty, {"noequals"}), config::ConfigError);
  CHECK_THROWS_AS(config::load_config("/nonexistent/config.ini", {}), config::ConfigError);
}

TEST_CASE("config rejects unparsable and out-of-range values") {
  std::istringstream empty;
  CHECK_THROWS(config::parse_config(empty, {"data.L=ten"}));
  CHECK_THROWS(config::parse_config(empty, {"data.split_ratio=1.5"}));
  CHECK_THROWS(config::parse_config(empty, {"manager.z_bar=nan"}));
}

TEST_CASE("overrides win over file values and shared values propagate") {
  std::istringstream ini("[run]\nseed = 5\n[data]\nL = 12\n[manager]\nz_bar = 0.7\n");
  const auto cfg = config::parse_config(ini, {"data.L=8", "run.seed=9"});
  CHECK(cfg.seed == 9);
  CHECK(cfg.generate.seed == 9);
  CHECK(cfg.generate.L == 8);
  CHECK(cfg.manager.L == 8);
  CHECK(cfg.replay.z_bar == 0.7);
  CHECK(cfg.train.rnn.seed == derive_seed(9, 101));
  CHECK(cfg.replay.seed == derive_seed(9, 103));
}

TEST_CASE("written config parses back to the same text") {
  std::istringstream empty;
  const auto cfg = config::parse_config(empty, {"sim.a_delta=0.35", "train.roster=lstm,cfc", "manager.port=4100",
                                                "baselines.kalman_q_grid=0.001,0.01"});
  std::ostringstream first;
  config::write_config(first, cfg);
  std::istringstream back(first.str());
  const auto again = config::parse_config(back, {});
  std::ostringstream second;
  config::write_config(second, again);
  CHECK(first.str() == second.str());
  CHECK(again.train.roster.size() == 2);
  CHECK(again.manager.port == 4100);

  // Every key appears exactly once.
  for (const auto& k : config::known_keys()) {
    const auto dot = k.find('.');
    CHECK(first.str().find("\n" + k.substr(dot + 1) + " = ") != std::string::npos);
  }
}
