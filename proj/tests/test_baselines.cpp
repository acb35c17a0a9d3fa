// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <complex>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "failnet/baselines.hpp"

using namespace failnet;
using namespace failnet::baselines;

namespace {

constexpr double kDt = 0.5;

PoseWindow line_window(double speed, double heading = 0.3, std::size_t L = 10) {
  PoseWindow w;
  for (std::size_t t = 0; t < L; ++t) {
    const double s = speed * kDt * static_cast<double>(t);
    w.poses.push_back({kDt * static_cast<double>(t), 1.0 + s * std::cos(heading), -0.5 + s * std::sin(heading), heading});
  }
  return w;
}

PoseWindow yaw_window(const std::vector<double>& yaw) {
  PoseWindow w;
  for (std::size_t t = 0; t < yaw.size(); ++t)
    w.poses.push_back({kDt * static_cast<double>(t), 0.1 * static_cast<double>(t), 0.0, wrap_angle(yaw[t])});
  return w;
}

}  // namespace

TEST_CASE("window speeds") {
  PoseWindow still = line_window(0.0);
  for (double s : window_speeds(still)) CHECK(s == 0.0);
  const auto v = window_speeds(line_window(0.3));
  CHECK(v.size() == 9);
  for (double s : v) CHECK(std::abs(s - 0.3) < 1e-9);

  // arc of radius R traversed at angular rate w: chord speed 2R sin(w dt / 2) / dt
  const double R = 0.8, w = 0.4;
  PoseWindow arc;
  for (int t = 0; t < 10; ++t) {
    const double a = w * kDt * t;
    arc.poses.push_back({kDt * t, R * std::cos(a), R * std::sin(a), a + std::numbers::pi / 2});
  }
  const double chord = 2 * R * std::sin(w * kDt / 2) / kDt;
  for (double s : window_speeds(arc)) CHECK(std::abs(s - chord) < 1e-9);

  PoseWindow one;
  one.poses.push_back({0, 0, 0, 0});
  CHECK_THROWS_AS(window_speeds(one), InvalidInput);
}

TEST_CASE("speed threshold detection") {
  ThresholdRule rule{Statistic::Avg, 0.4, RuleFeature::Speed, 0.0};
  CHECK(speed_threshold_detect(line_window(0.0), rule) == 0);
  CHECK(speed_threshold_detect(line_window(0.5), rule) == 1);
  CHECK(speed_threshold_detect(line_window(0.3), rule) == 0);
  rule.statistic = Statistic::Max;
  CHECK(speed_threshold_detect(line_window(0.5), rule) == 1);

  // monotone in the threshold
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const PoseWindow w = line_window(rng.uniform(0.0, 1.0));
    ThresholdRule lo{Statistic::Avg, rng.uniform(0.0, 1.0), RuleFeature::Speed, 0.0};
    ThresholdRule hi = lo;
    hi.threshold += rng.uniform(0.0, 0.5);
    CHECK(speed_threshold_detect(w, hi) <= speed_threshold_detect(w, lo));
  }
}

TEST_CASE("yaw spectrum") {
  SUBCASE("constant yaw has no power") {
    for (double p : fft_yaw_power(yaw_window(std::vector<double>(10, 0.7)))) CHECK(p < 1e-24);
  }
  SUBCASE("pure tone lands in its bin") {
    std::vector<double> yaw;
    for (int t = 0; t < 10; ++t) yaw.push_back(0.3 * std::sin(2 * std::numbers::pi * 3 * t / 10.0));
    const auto p = fft_yaw_power(yaw_window(yaw));
    REQUIRE(p.size() == 4);  // modes 2..5
    CHECK(p[1] == doctest::Approx(std::pow(0.3 * 5, 2)).epsilon(1e-12));
    CHECK(p[0] < 1e-12);
    CHECK(p[2] < 1e-12);
    CHECK(p[3] < 1e-12);
  }
  SUBCASE("matches a direct DFT") {
    Rng rng(2);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t L = 4 + 2 * rng.below(8);
      std::vector<double> yaw;
      for (std::size_t t = 0; t < L; ++t) yaw.push_back(rng.uniform(-1.0, 1.0));
      const auto p = fft_yaw_power(yaw_window(yaw));
      REQUIRE(p.size() == L / 2 - 1);
      const auto ref = oracle::dft_power(yaw);
      for (std::size_t k = 0; k < ref.size(); ++k) worst = std::max(worst, std::abs(ref[k] - p[k]));
    }
    CHECK(worst < 1e-9);
  }
  SUBCASE("yaw is unwrapped across the branch cut") {
    std::vector<double> yaw;
    for (int t = 0; t < 10; ++t) yaw.push_back(2.9 + 0.1 * t);  // crosses pi
    std::vector<double> shifted;
    for (double y : yaw) shifted.push_back(y - 2.0);  // same shape, no crossing
    const auto a = fft_yaw_power(yaw_window(yaw));
    const auto b = fft_yaw_power(yaw_window(shifted));
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(std::abs(a[k] - b[k]) < 1e-9);
  }
  ThresholdRule rule{Statistic::Max, 1e-6, RuleFeature::FftPower, 0.0};
  CHECK(fft_threshold_detect(yaw_window(std::vector<double>(10, 0.2)), rule) == 0);
  std::vector<double> wiggle;
  for (int t = 0; t < 10; ++t) wiggle.push_back(0.4 * std::sin(2 * std::numbers::pi * 4 * t / 10.0));
  CHECK(fft_threshold_detect(yaw_window(wiggle), rule) == 1);
}

TEST_CASE("threshold fitting") {
  SUBCASE("separated scores") {
    std::vector<std::vector<double>> v{{0.1}, {0.2}, {0.3}, {0.7}, {0.8}};
    std::vector<int> z{0, 0, 0, 1, 1};
    auto r = fit_threshold(v, z, RuleFeature::Speed);
    CHECK(r.fit_accuracy == 1.0);
    CHECK(r.threshold > 0.3);
    CHECK(r.threshold < 0.7);
    CHECK(r.statistic == Statistic::Avg);
  }
  SUBCASE("constant scores give the majority prior") {
    std::vector<std::vector<double>> v(10, {0.5, 0.5});
    std::vector<int> z{1, 1, 1, 0, 0, 0, 0, 0, 0, 0};
    CHECK(fit_threshold(v, z, RuleFeature::Speed).fit_accuracy == 0.7);
    std::vector<int> z2{1, 1, 1, 1, 1, 1, 0, 0, 0, 0};
    CHECK(fit_threshold(v, z2, RuleFeature::Speed).fit_accuracy == 0.6);
  }
  SUBCASE("single class is rejected") {
    std::vector<std::vector<double>> v{{0.1}, {0.2}};
    std::vector<int> z{1, 1};
    CHECK_THROWS_AS(fit_threshold(v, z, RuleFeature::Speed), InvalidInput);
  }
  SUBCASE("matches brute-force enumeration") {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 2 + rng.below(499);
      const bool coarse = trial % 3 == 0;  // many ties
      std::vector<std::vector<double>> v(n);
      std::vector<int> z(n);
      for (std::size_t i = 0; i < n; ++i) {
        z[i] = static_cast<int>(rng.below(2));
        const std::size_t m = 1 + rng.below(5);
        for (std::size_t k = 0; k < m; ++k)
          v[i].push_back(coarse ? static_cast<double>(rng.below(4)) : rng.uniform(0.0, 1.0) + 0.3 * z[i]);
      }
      z[0] = 0;
      z[1] = 1;
      const auto fast = fit_threshold(v, z, RuleFeature::FftPower);
      const auto slow = oracle::brute_force_fit(v, z);
      CHECK(fast.statistic == slow.statistic);
      CHECK(fast.threshold == slow.threshold);
      CHECK(fast.fit_accuracy == slow.fit_accuracy);
      CHECK(fast.feature == RuleFeature::FftPower);
    }
  }
}

TEST_CASE("kalman filter") {
  KalmanConfig cfg;
  SUBCASE("model-matched motion") {
    const auto res = kalman_residuals(line_window(0.3), cfg);
    CHECK(res.size() == 8);
    for (double r : res) {
      CHECK(r >= 0.0);
      CHECK(r < 1e-3);
    }
    CHECK(kalman_detect(line_window(0.3), cfg) == 0);
  }
  SUBCASE("velocity step produces a spike") {
    PoseWindow w;
    double x = 0;
    for (int t = 0; t < 10; ++t) {
      w.poses.push_back({kDt * t, x, 0.0, 0.0});
      x += (t < 5 ? 0.3 : 0.9) * kDt;
    }
    const auto res = kalman_residuals(w, cfg);
    double before = 0;
    for (std::size_t i = 0; i + 2 < 4; ++i) before = std::max(before, res[i]);  // steps 2..3
    CHECK(res[4] > 5 * before);  // step 6, the first position after the change
  }
  SUBCASE("matches a textbook filter") {
    Rng rng(4);
    PoseWindow w;
    for (int t = 0; t < 10; ++t) w.poses.push_back({kDt * t, rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    KalmanState s = kalman_init(w.poses[0], cfg);

    Eigen::MatrixXd x(6, 1), P = Eigen::MatrixXd::Zero(6, 6);
    x << w.poses[0].x, w.poses[0].y, w.poses[0].theta, 0, 0, 0;
    for (int i = 0; i < 3; ++i) P(i, i) = cfg.r;
    for (int i = 3; i < 6; ++i) P(i, i) = cfg.velocity_prior;
    Eigen::MatrixXd F = Eigen::MatrixXd::Identity(6, 6), Q = Eigen::MatrixXd::Zero(6, 6);
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(3, 6);
    for (int i = 0; i < 3; ++i) {
      F(i, i + 3) = kDt;
      Q(i, i) = cfg.q * std::pow(kDt, 3) / 3;
      Q(i, i + 3) = Q(i + 3, i) = cfg.q * kDt * kDt / 2;
      Q(i + 3, i + 3) = cfg.q * kDt;
      H(i, i) = 1;
    }
    const Eigen::MatrixXd R = cfg.r * Eigen::MatrixXd::Identity(3, 3);
    double worst = 0;
    for (int t = 1; t < 10; ++t) {
      kalman_predict(s, kDt, cfg);
      kalman_update(s, w.poses[t], cfg);
      x = F * x;
      P = F * P * F.transpose() + Q;
      Eigen::Vector3d y(w.poses[t].x - x(0), w.poses[t].y - x(1), wrap_angle(w.poses[t].theta - x(2)));
      const Eigen::MatrixXd K = P * H.transpose() * (H * P * H.transpose() + R).inverse();
      x = x + K * y;
      P = (Eigen::MatrixXd::Identity(6, 6) - K * H) * P;
      worst = std::max({worst, (s.x - x).cwiseAbs().maxCoeff(), (s.P - P).cwiseAbs().maxCoeff()});
    }
    CHECK(worst < 1e-9);
  }
  SUBCASE("validation and grid fit") {
    KalmanConfig bad = cfg;
    bad.q = -1;
    CHECK_THROWS_AS(kalman_residuals(line_window(0.3), bad), InvalidInput);

    std::vector<PoseWindow> ws;
    Rng rng(5);
    for (int i = 0; i < 20; ++i) {
      PoseWindow w = line_window(rng.uniform(0.2, 0.4), rng.uniform(-3, 3));
      w.label = 0;
      if (i % 2) {
        w.label = 1;
        for (std::size_t t = 0; t < w.poses.size(); ++t) w.poses[t].y += (t % 2 ? 0.05 : -0.05);
      }
      ws.push_back(w);
    }
    const double qs[] = {1e-3, 1e-2}, rs[] = {1e-4, 1e-3};
    double acc = 0;
    const auto fitted = fit_kalman(ws, qs, rs, cfg, &acc);
    CHECK(acc == 1.0);
    for (const auto& w : ws) CHECK(kalman_detect(w, fitted) == w.label);
  }
}

TEST_CASE("mlp variants") {
  CHECK(default_mlp(PreFilter::None, 10).parameter_count() == 8129);
  CHECK(prefilter_dim(PreFilter::Speed, 10) == 9);
  CHECK(prefilter_dim(PreFilter::Fft, 10) == 4);

  for (auto p : {PreFilter::None, PreFilter::Speed, PreFilter::Fft}) {
    MlpDetector zero(p, 10, data::FeatureMode::Global);
    CHECK(zero.predict(line_window(0.3)) == 0.5);
    CHECK(zero.features(line_window(0.3)).size() == prefilter_dim(p, 10));
    CHECK_THROWS_AS(zero.predict(line_window(0.3, 0.0, 8)), InvalidInput);
  }

  Rng rng(6);
  MlpDetector d(PreFilter::Speed, 10, data::FeatureMode::Global);
  d.model.net.init(rng);
  std::vector<PoseWindow> ws;
  for (int i = 0; i < 30; ++i) ws.push_back(line_window(rng.uniform(0.1, 0.6)));
  d.fit_normalization(d.batch(ws));
  auto ck = to_checkpoint(d);
  std::stringstream ss;
  nn::write_checkpoint(ss, ck);
  MlpDetector back = mlp_from_checkpoint(nn::read_checkpoint(ss));
  CHECK(back.prefilter == PreFilter::Speed);
  for (const auto& w : ws) CHECK(back.predict(w) == d.predict(w));

  ck.attributes["prefilter"] = "fft";
  CHECK_THROWS_AS(mlp_from_checkpoint(ck), FormatError);
}

TEST_CASE("rule files") {
  RuleSet rules;
  rules.speed = ThresholdRule{Statistic::Max, 0.41234567890123, RuleFeature::Speed, 0.9};
  rules.fft = ThresholdRule{Statistic::Avg, 1e-3, RuleFeature::FftPower, 0.55};
  KalmanConfig k;
  k.q = 0.05;
  k.delta = 0.013;
  rules.kalman = k;
  rules.kalman_fit_accuracy = 0.6;
  std::stringstream ss;
  write_rules(ss, rules);
  const RuleSet back = read_rules(ss);
  REQUIRE(back.speed);
  REQUIRE(back.fft);
  REQUIRE(back.kalman);
  CHECK(back.speed->threshold == rules.speed->threshold);
  CHECK(back.speed->statistic == Statistic::Max);
  CHECK(back.fft->feature == RuleFeature::FftPower);
  CHECK(back.kalman->q == 0.05);
  CHECK(back.kalman->delta == 0.013);
  CHECK(back.kalman_fit_accuracy == 0.6);

  std::stringstream bad("failnet-rules 1\nspeed median 0.1 0.5\nend\n");
  CHECK_THROWS_AS(read_rules(bad), FormatError);
  std::stringstream noend("failnet-rules 1\n");
  CHECK_THROWS_AS(read_rules(noend), FormatError);
}
