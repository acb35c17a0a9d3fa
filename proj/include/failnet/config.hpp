// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "failnet/manager.hpp"
#include "failnet/pipeline.hpp"

namespace failnet::config {

/// Effective settings for every subcommand.
struct RunConfig {
  std::uint64_t seed = 1;
  pipeline::GenerateConfig generate;
  pipeline::TrainSettings train;
  bool grad_check_before_train = false;
  double grad_check_eps = 1e-5;
  std::size_t grad_check_seeds = 10;
  manager::ManagerConfig manager;
  manager::ReplayConfig replay;
  std::string replay_detector = "best";  // method key or "best"

  /// Copies shared values (seed, L, rate, map, failure model, z_bar) into
  /// the per-module structs and validates them.
  void finalize();
};

/// Thrown for unknown keys and unparsable values.
class ConfigError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

/// Every accepted `section.key`, in file order.
std::vector<std::string> known_keys();

/// Reads an INI file (empty path: defaults), then applies `key=value`
/// overrides. Unknown keys are rejected.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides);
RunConfig parse_config(std::istream& ini, const std::vector<std::string>& overrides);

/// Writes the full effective configuration as INI.
void write_config(std::ostream& os, const RunConfig& cfg);

}  // namespace failnet::config
