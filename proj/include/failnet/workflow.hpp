// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "failnet/config.hpp"

namespace failnet::workflow {

/// Run directory layout shared by every subcommand:
///   config.ini, logs/, dataset/, models/, reports/, replay/
struct RunDir {
  std::string root;

  std::string config() const;
  std::string logs() const;
  std::string dataset() const;
  std::string models() const;
  std::string reports() const;
  std::string replay() const;
};

/// Raised when an input artefact (dataset, checkpoint, report) is missing.
class MissingInput : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Thrown when the output directory already holds results and force is off.
class OutputExists : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

using pipeline::Check;
using pipeline::Logger;

struct GenerateSummary {
  std::size_t logs = 0;
  std::size_t windows = 0;
  std::map<FailureMode, std::size_t> counts;
};

/// Simulates and windows the corpus into `dir`, and writes config.ini.
GenerateSummary run_generate(const config::RunConfig& cfg, const RunDir& dir, bool force, const Logger& log = {});

/// Seed of the train/validation split for a run seed.
std::uint64_t split_seed(std::uint64_t run_seed);

/// Loads the dataset written by run_generate and splits it.
data::DatasetSplit load_split(const config::RunConfig& cfg, const RunDir& dir, data::DatasetMeta* meta = nullptr);

/// Gradient-check verdict over the suite in pipeline::run_grad_checks.
struct GradCheckSummary {
  std::vector<pipeline::GradCheckResult> results;
  double seconds = 0.0;
  double worst = 0.0;
  bool pass = false;
};

GradCheckSummary run_grad_check(const config::RunConfig& cfg);
std::string format_grad_check(const GradCheckSummary& s);

/// Trains the roster and writes checkpoints, rules and curves to models/.
void run_train(const config::RunConfig& cfg, const RunDir& dir, const Logger& log = {});

struct EvaluateResult {
  eval::EvalReport report;
  std::vector<Check> checks;
  bool pass() const;
};

/// Scores every trained method on the validation split and writes
/// reports/table1.{csv,txt}.
EvaluateResult run_evaluate(const config::RunConfig& cfg, const RunDir& dir, const Logger& log = {});

/// Resolves replay.detector ("best" picks the most accurate recurrent model
/// from reports/table1.csv, evaluating first if the report is missing).
pipeline::Method resolve_detector(const config::RunConfig& cfg, const RunDir& dir, const Logger& log = {});

struct ReplayResult {
  pipeline::Method method{};
  eval::EvalReport report;
  manager::ReplaySummary summary;
  std::size_t mismatches = 0;
  std::vector<Check> checks;
  bool pass() const;
};

/// Closed-loop replay of every mode against the chosen detector. Writes
/// replay/table2.{csv,txt} and replay/events_<Mode>.log.
ReplayResult run_replay(const config::RunConfig& cfg, const RunDir& dir, const Logger& log = {});

/// Checkpoint path for the manager: manager.checkpoint when set, otherwise
/// the resolved replay detector under models/.
std::string serve_checkpoint(const config::RunConfig& cfg, const RunDir& dir, const Logger& log = {});

std::string format_checks(const std::vector<Check>& checks);

}  // namespace failnet::workflow
