// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "failnet/baselines.hpp"
#include "failnet/data.hpp"
#include "failnet/eval.hpp"
#include "failnet/rnn.hpp"
#include "failnet/sim.hpp"

namespace failnet::pipeline {

using Logger = std::function<void(const std::string&)>;

// --- generation -------------------------------------------------------------

struct GenerateConfig {
  sim::TrackMap map = sim::default_map();
  sim::FailureConfig failure;        // mode is set per log
  double minutes_per_mode = 30.0;    // each failure mode
  double nominal_minutes = 120.0;
  double log_seconds = 120.0;        // duration of one source log
  double sim_dt = 0.02;
  double rate = 2.0;
  std::size_t L = 10;
  std::size_t stride = 1;
  data::FeatureMode feature_mode = data::FeatureMode::Egocentric;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Generated {
  std::vector<sim::TrajectoryLog> logs;
  std::vector<data::PoseWindow> windows;
  data::DatasetMeta meta;
};

/// Resamples a log and cuts masked sliding windows labelled by its mode.
std::vector<data::PoseWindow> windows_from_log(const sim::TrajectoryLog& log, const GenerateConfig& cfg);

/// Simulates every mode (logs cycle through the map routes) and windows
/// the result. Seeds derive from cfg.seed by (mode, log index).
Generated generate(const GenerateConfig& cfg, const Logger& log = {});

/// Writes `<dir>/logs/<source>.csv` and the dataset under `<dir>/dataset`.
void save_generated(const Generated& g, const std::string& dir);

// --- methods ----------------------------------------------------------------

enum class Method { SpeedThreshold, FftThreshold, Kalman, Mlp, SpeedMlp, FftMlp, Lstm, Gru, Cfc };

inline constexpr std::array<Method, 9> kAllMethods = {Method::SpeedThreshold, Method::FftThreshold,
                                                      Method::Kalman,         Method::Mlp,
                                                      Method::SpeedMlp,       Method::FftMlp,
                                                      Method::Lstm,           Method::Gru,
                                                      Method::Cfc};

/// Display name used in reports.
std::string_view method_name(Method m);
/// Short key used in configs and file names.
std::string_view method_key(Method m);
Method parse_method(std::string_view key);
bool is_learned(Method m);
bool is_recurrent(Method m);

struct TrainSettings {
  std::vector<Method> roster{kAllMethods.begin(), kAllMethods.end()};
  nn::TrainConfig rnn;
  nn::TrainConfig mlp;
  double split_ratio = 0.8;
  double t_stamp = 0.5;
  double threshold = 0.5;
  std::vector<double> kalman_q{1e-3, 1e-2, 1e-1, 1.0};
  std::vector<double> kalman_r{1e-5, 1e-4, 1e-3, 1e-2};
  baselines::KalmanConfig kalman;

  TrainSettings();
};

struct TrainedModels {
  std::map<Method, rnn::FailureNetModel> rnns;
  std::map<Method, baselines::MlpDetector> mlps;
  baselines::RuleSet rules;
  std::map<Method, nn::TrainHistory> histories;
  std::size_t L = 10;
  data::FeatureMode feature_mode = data::FeatureMode::Egocentric;

  bool has(Method m) const;
};

/// Trains the learned models on the training split and fits the threshold
/// rules and the Kalman grid on the validation split.
TrainedModels train_all(const data::DatasetSplit& split, std::size_t L, data::FeatureMode mode,
                        const TrainSettings& settings, const Logger& log = {});

/// Writes checkpoints (`<key>.ckpt`), `rules.txt` and `curves_<key>.csv`.
void save_models(TrainedModels& models, const std::string& dir);
TrainedModels load_models(const std::string& dir);

// --- evaluation -------------------------------------------------------------

/// Per-window scores; threshold methods return 0 or 1, learned ones z_hat.
/// Learned models are evaluated one window at a time so the values match
/// the manager bit for bit.
std::vector<double> predict(Method m, const TrainedModels& models, const std::vector<data::PoseWindow>& windows);

std::size_t method_parameters(Method m, TrainedModels& models);

eval::EvalReport evaluate_all(TrainedModels& models, const std::vector<data::PoseWindow>& windows,
                              const std::vector<Method>& roster);

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Table I ordering: best RNN >= MLP >= FFT+MLP >= FFT threshold.
std::vector<Check> ordering_checks(const eval::EvalReport& report);

/// Accuracy floors (each RNN >= 0.90, MLP >= 0.85) and the baseline
/// signatures (speed rule, FFT rule, Kalman rule) for the methods present.
std::vector<Check> accuracy_checks(const eval::EvalReport& report);

/// Display name of the most accurate recurrent model in the report.
std::optional<Method> best_rnn(const eval::EvalReport& report);

// --- gradient verification --------------------------------------------------

struct GradCheckResult {
  std::string model;
  std::uint64_t seed = 0;
  std::size_t parameters = 0;
  double max_rel_error = 0.0;
};

/// Central-difference checks over L-step sequences for the shipped MLP and
/// CfC and for reduced-width LSTM/GRU (hidden 5, decoder 6), one random
/// initialisation and batch per seed.
std::vector<GradCheckResult> run_grad_checks(std::size_t seeds, double eps, std::uint64_t base_seed,
                                             std::size_t L = 10);

}  // namespace failnet::pipeline
