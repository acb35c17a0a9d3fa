// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "failnet/data.hpp"
#include "failnet/nn.hpp"

namespace failnet::baselines {

using data::PoseWindow;

// --- threshold rules --------------------------------------------------------

enum class Statistic { Avg, Max };
enum class RuleFeature { Speed, FftPower, KalmanResidual };

std::string_view statistic_name(Statistic s);
Statistic parse_statistic(std::string_view s);
std::string_view rule_feature_name(RuleFeature f);
RuleFeature parse_rule_feature(std::string_view s);

/// Verdict = statistic(values) >= threshold.
struct ThresholdRule {
  Statistic statistic = Statistic::Avg;
  double threshold = 0.0;
  RuleFeature feature = RuleFeature::Speed;
  double fit_accuracy = 0.0;
};

double apply_statistic(std::span<const double> values, Statistic s);
int threshold_verdict(std::span<const double> values, const ThresholdRule& rule);

/// Exhaustive fit over both statistics (or only `only`). Candidates per
/// statistic are the doubles just below the smallest and just above the
/// largest score plus midpoints between consecutive distinct scores, so no
/// candidate equals a score. Returns the overall-accuracy maximiser; ties
/// go to the lower threshold, then to Avg.
ThresholdRule fit_threshold(const std::vector<std::vector<double>>& values, std::span<const int> labels,
                            RuleFeature feature, std::optional<Statistic> only = std::nullopt);

// --- speed ------------------------------------------------------------------

/// Finite-difference speeds |p_t - p_{t-1}| / dt (L-1 values).
std::vector<double> window_speeds(const PoseWindow& w);
int speed_threshold_detect(const PoseWindow& w, const ThresholdRule& rule);

// --- spectral ---------------------------------------------------------------

/// |X_k|^2 of the unwrapped yaw for k = 2 .. L/2.
std::vector<double> fft_yaw_power(const PoseWindow& w);
int fft_threshold_detect(const PoseWindow& w, const ThresholdRule& rule);

// --- Kalman -----------------------------------------------------------------

/// Constant-velocity filter over (x, y, theta, vx, vy, omega) observing the
/// pose. Process noise is the white-acceleration model scaled by q.
struct KalmanConfig {
  double q = 0.01;
  double r = 1e-4;
  double delta = 0.2;
  Statistic aggregation = Statistic::Max;
  std::size_t warmup = 2;
  double velocity_prior = 1.0;

  void validate() const;
};

using KVec = Eigen::Matrix<double, 6, 1>;
using KMat = Eigen::Matrix<double, 6, 6>;

struct KalmanState {
  KVec x = KVec::Zero();
  KMat P = KMat::Identity();
};

KalmanState kalman_init(const Pose& first, const KalmanConfig& cfg);
void kalman_predict(KalmanState& s, double dt, const KalmanConfig& cfg);
/// Measurement update; returns the planar post-fit residual.
double kalman_update(KalmanState& s, const Pose& obs, const KalmanConfig& cfg);

/// Post-fit residuals for steps warmup .. L-1.
std::vector<double> kalman_residuals(const PoseWindow& w, const KalmanConfig& cfg);
int kalman_detect(const PoseWindow& w, const KalmanConfig& cfg);

/// Grid search over (q, r) with an exhaustive threshold fit per pair; the
/// aggregation follows cfg.aggregation.
KalmanConfig fit_kalman(const std::vector<PoseWindow>& windows, std::span<const double> q_grid,
                        std::span<const double> r_grid, const KalmanConfig& base, double* accuracy_out = nullptr);

// --- MLP variants -----------------------------------------------------------

enum class PreFilter { None, Speed, Fft };

std::string_view prefilter_name(PreFilter p);
PreFilter parse_prefilter(std::string_view s);

/// Input width for a window of length L: 3L, L-1 or L/2-1.
Eigen::Index prefilter_dim(PreFilter p, std::size_t L);

/// Shipped sizes: input -> 128 -> 32 -> 1 with ReLU.
nn::MlpParams default_mlp(PreFilter p, std::size_t L);

class MlpDetector {
 public:
  MlpDetector() = default;
  MlpDetector(PreFilter p, std::size_t L, data::FeatureMode mode);

  Eigen::VectorXd features(const PoseWindow& w) const;
  nn::Batch batch(const std::vector<PoseWindow>& windows) const;
  void fit_normalization(const nn::Batch& raw);
  double predict(const PoseWindow& w) const;
  std::size_t parameter_count() { return model.parameter_count(); }

  PreFilter prefilter = PreFilter::None;
  std::size_t L = 10;
  data::FeatureMode feature_mode = data::FeatureMode::Egocentric;
  nn::MlpModel model;
  Eigen::VectorXd in_mean;
  Eigen::VectorXd in_std;

 private:
  nn::Batch normalized(nn::Batch b) const;
  friend nn::TrainHistory train_mlp_detector(MlpDetector&, const data::DatasetSplit&, const nn::TrainConfig&);
};

/// Fits normalisation on the training windows and trains the MLP.
nn::TrainHistory train_mlp_detector(MlpDetector& det, const data::DatasetSplit& split, const nn::TrainConfig& cfg);

nn::Checkpoint to_checkpoint(MlpDetector& det);
MlpDetector mlp_from_checkpoint(const nn::Checkpoint& ckpt);

// --- rule files -------------------------------------------------------------

struct RuleSet {
  std::optional<ThresholdRule> speed;
  std::optional<ThresholdRule> fft;
  std::optional<KalmanConfig> kalman;
  double kalman_fit_accuracy = 0.0;
};

void write_rules(std::ostream& os, const RuleSet& rules);
RuleSet read_rules(std::istream& is);

}  // namespace failnet::baselines
