// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "doctest.h"
#include "failnet/data.hpp"
#include "failnet/rng.hpp"

using namespace failnet;
using namespace failnet::data;

namespace {

sim::TrajectoryLog make_log(std::size_t n, double dt, auto&& fn) {
  sim::TrajectoryLog log;
  log.vehicle_id = "test";
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) * dt;
    auto [x, y, th] = fn(t);
    log.samples.push_back({t, x, y, th, 0.3, 0.0});
  }
  return log;
}

std::vector<Pose> line_series(std::size_t n, double x0, double y0, double dx, double dy) {
  std::vector<Pose> s;
  for (std::size_t i = 0; i < n; ++i)
    s.push_back({0.5 * i, x0 + dx * i, y0 + dy * i, std::atan2(dy, dx)});
  return s;
}

}  // namespace

TEST_CASE("resample_poses") {
  SUBCASE("exact alignment picks every 25th sample of a 50 Hz log") {
    auto log = make_log(1001, 0.02, [](double t) { return std::tuple{t, std::sin(t), 0.1 * t}; });
    auto r = resample_poses(log, 2.0);
    REQUIRE(r.size() == 41);
    for (std::size_t k = 0; k < r.size(); ++k) {
      const auto& s = log.samples[25 * k];
      CHECK(r[k].t == s.t);
      CHECK(r[k].x == s.x);
      CHECK(r[k].y == s.y);
      CHECK(r[k].theta == s.theta);
    }
  }
  SUBCASE("constant pose stays constant") {
    auto log = make_log(300, 0.02, [](double) { return std::tuple{1.5, -0.5, 2.0}; });
    for (const auto& p : resample_poses(log, 2.0)) {
      CHECK(p.x == 1.5);
      CHECK(p.y == -0.5);
      CHECK(p.theta == 2.0);
    }
  }
  SUBCASE("interpolation error is within the linear interpolation bound") {
    // Log at 3 Hz resampled at 2 Hz: most targets fall between samples.
    const double dt = 1.0 / 3.0;
    const double w = 0.8, amp = 0.5;
    auto log = make_log(200, dt, [&](double t) { return std::tuple{t, amp * std::sin(w * t), 0.0}; });
    const double bound = dt * dt * amp * w * w / 8.0;
    double worst = 0.0;
    for (const auto& p : resample_poses(log, 2.0))
      worst = std::max(worst, std::abs(p.y - amp * std::sin(w * p.t)));
    CHECK(worst > 0.0);
    CHECK(worst <= bound + 1e-12);
  }
  SUBCASE("heading interpolates across the wrap") {
    sim::TrajectoryLog log;
    log.samples.push_back({0.0, 0, 0, 3.1, 0, 0});
    log.samples.push_back({1.0, 0, 0, -3.1, 0, 0});
    auto r = resample_poses(log, 2.0);
    REQUIRE(r.size() == 3);
    CHECK(std::abs(std::abs(r[1].theta) - std::numbers::pi) < 1e-12);
  }
  SUBCASE("empty log") {
    CHECK(resample_poses(sim::TrajectoryLog{}, 2.0).empty());
  }
}

TEST_CASE("make_windows") {
  const auto series = line_series(10, 5.0, 5.0, 0.1, 0.0);
  CHECK(make_windows(series, 10, 1, nullptr, FailureMode::Nominal, "a").size() == 1);
  CHECK(make_windows(line_series(14, 5, 5, 0.1, 0), 10, 1, nullptr, FailureMode::Nominal, "a").size() == 5);
  CHECK(make_windows(line_series(9, 5, 5, 0.1, 0), 10, 1, nullptr, FailureMode::Nominal, "a").empty());
  CHECK_THROWS_AS(make_windows(series, 1, 1, nullptr, FailureMode::Nominal, "a"), InvalidInput);
  CHECK_THROWS_AS(make_windows(series, 5, 0, nullptr, FailureMode::Nominal, "a"), InvalidInput);

  SUBCASE("masking matches a brute-force final-pose filter") {
    sim::TrackMap map;
    map.r_mask = 0.5;
    // Straight pass through the intersection.
    const auto s = line_series(60, -3.0, 0.1, 0.1, 0.0);
    for (std::size_t L : {2u, 5u, 10u}) {
      for (std::size_t stride : {1u, 2u, 3u}) {
        auto ws = make_windows(s, L, stride, &map, FailureMode::LaneShift, "x");
        std::size_t expected = 0;
        for (std::size_t start = 0; start + L <= s.size(); start += stride) {
          const auto& last = s[start + L - 1];
          if (std::hypot(last.x, last.y) > map.r_mask) ++expected;
        }
        CHECK(ws.size() == expected);
        for (const auto& w : ws) {
          CHECK(w.poses.size() == L);
          CHECK(w.label == 1);
          CHECK(std::hypot(w.poses.back().x, w.poses.back().y) > map.r_mask);
          for (std::size_t i = 1; i < L; ++i) CHECK(std::abs(w.poses[i].t - w.poses[i - 1].t - 0.5) < 1e-6);
        }
      }
    }
  }
}

TEST_CASE("featurize") {
  Rng rng(5);
  auto random_window = [&] {
    PoseWindow w;
    double x = rng.uniform(-2, 2), y = rng.uniform(-2, 2), th = rng.uniform(-3, 3);
    for (int i = 0; i < 10; ++i) {
      w.poses.push_back({0.5 * i, x, y, wrap_angle(th)});
      th += rng.uniform(-0.3, 0.3);
      x += 0.15 * std::cos(th);
      y += 0.15 * std::sin(th);
    }
    return w;
  };

  SUBCASE("egocentric starts at the origin") {
    for (int k = 0; k < 20; ++k) {
      auto f = featurize(random_window(), FeatureMode::Egocentric);
      CHECK(f.steps.front() == Feature{0.0, 0.0, 0.0});
    }
  }
  SUBCASE("window already at the origin: egocentric equals global") {
    PoseWindow w;
    for (int i = 0; i < 10; ++i) w.poses.push_back({0.5 * i, 0.1 * i, 0.01 * i * i, 0.02 * i});
    auto g = featurize(w, FeatureMode::Global);
    auto e = featurize(w, FeatureMode::Egocentric);
    for (std::size_t i = 0; i < 10; ++i)
      for (int j = 0; j < 3; ++j) CHECK(e.steps[i][j] == doctest::Approx(g.steps[i][j]).epsilon(1e-12));
  }
  SUBCASE("egocentric features are invariant to rigid motions") {
    for (int trial = 0; trial < 100; ++trial) {
      auto w = random_window();
      const double a = rng.uniform(-std::numbers::pi, std::numbers::pi);
      const double tx = rng.uniform(-10, 10), ty = rng.uniform(-10, 10);
      PoseWindow moved = w;
      for (auto& p : moved.poses) {
        const double x = std::cos(a) * p.x - std::sin(a) * p.y + tx;
        const double y = std::sin(a) * p.x + std::cos(a) * p.y + ty;
        p = {p.t, x, y, wrap_angle(p.theta + a)};
      }
      auto f0 = featurize(w, FeatureMode::Egocentric);
      auto f1 = featurize(moved, FeatureMode::Egocentric);
      for (std::size_t i = 0; i < 10; ++i)
        for (int j = 0; j < 3; ++j) CHECK(std::abs(f0.steps[i][j] - f1.steps[i][j]) < 1e-9);
    }
  }
  SUBCASE("global mode passes raw poses") {
    auto w = random_window();
    auto f = featurize(w, FeatureMode::Global);
    for (std::size_t i = 0; i < 10; ++i) CHECK(f.steps[i] == Feature{w.poses[i].x, w.poses[i].y, w.poses[i].theta});
  }
}

TEST_CASE("split_dataset") {
  auto windows_for = [](FailureMode mode, const std::string& src, int n) {
    std::vector<PoseWindow> out;
    for (int i = 0; i < n; ++i) {
      PoseWindow w;
      w.poses = line_series(10, i, 0, 0.1, 0);
      w.mode = mode;
      w.label = mode_label(mode);
      w.source = src;
      out.push_back(w);
    }
    return out;
  };
  SUBCASE("single log goes to training") {
    auto ws = windows_for(FailureMode::Nominal, "only", 7);
    auto s = split_dataset(ws, 1.0 - 1e-9, 1);
    CHECK(s.train.size() == 7);
    CHECK(s.validation.empty());
    CHECK(!s.warnings.empty());
  }
  SUBCASE("deterministic and log-granular") {
    std::vector<PoseWindow> ws;
    for (auto mode : kAllModes)
      for (int k = 0; k < 10; ++k) {
        auto part = windows_for(mode, std::string(mode_name(mode)) + "_" + std::to_string(k), 3 + k);
        ws.insert(ws.end(), part.begin(), part.end());
      }
    auto a = split_dataset(ws, 0.8, 42);
    auto b = split_dataset(ws, 0.8, 42);
    CHECK(a.train_sources == b.train_sources);
    CHECK(a.validation_sources == b.validation_sources);
    CHECK(a.warnings.empty());
    CHECK(a.train_sources.size() == 40);
    CHECK(a.validation_sources.size() == 10);
    // Enumerate: every window lands on the side of its source, and the
    // window counts equal the per-source totals.
    std::set<std::string> train_src(a.train_sources.begin(), a.train_sources.end());
    std::size_t expected_train = 0;
    for (const auto& w : ws) expected_train += train_src.count(w.source);
    CHECK(a.train.size() == expected_train);
    CHECK(a.train.size() + a.validation.size() == ws.size());
    for (const auto& w : a.validation) CHECK(train_src.count(w.source) == 0);
    for (auto mode : kAllModes) {
      CHECK(a.train_counts[mode] > 0);
      CHECK(a.validation_counts[mode] > 0);
    }
    CHECK_THROWS_AS(split_dataset(ws, 1.0, 1), InvalidInput);
  }
}

TEST_CASE("dataset record format round trip") {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    PoseWindow w;
    w.mode = kAllModes[rng.below(5)];
    w.label = mode_label(w.mode);
    for (int i = 0; i < 10; ++i)
      w.poses.push_back({0.5 * i, rng.uniform(-1e3, 1e3), rng.uniform(-1e-4, 1e-4), rng.uniform(-3.14, 3.14)});
    const auto line = format_window(w);
    auto back = parse_window(line, 2.0);
    CHECK(format_window(back) == line);
    CHECK(back.mode == w.mode);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(back.poses[i].x == doctest::Approx(w.poses[i].x).epsilon(1e-8));
      CHECK(back.poses[i].t == doctest::Approx(0.5 * i));
    }
  }
  CHECK(format_window(PoseWindow{{{0, 1, 2, 3}, {0.5, 4, 5, 6}}, 0, FailureMode::Nominal, ""}) ==
        "0,Nominal,2,1:2:3;4:5:6");
  CHECK_THROWS_AS(parse_window("1,Nominal,1,0:0:0", 2.0), FormatError);
  CHECK_THROWS_AS(parse_window("0,Nominal,2,0:0:0", 2.0), FormatError);
  CHECK_THROWS_AS(parse_window("garbage", 2.0), FormatError);
}

TEST_CASE("dataset directory save and load") {
  const auto dir = std::filesystem::temp_directory_path() / "failnet_test_dataset";
  std::filesystem::remove_all(dir);
  std::vector<PoseWindow> ws;
  for (auto mode : kAllModes)
    for (int k = 0; k < 2; ++k)
      for (int i = 0; i < 3; ++i) {
        PoseWindow w;
        w.poses = line_series(10, i, k, 0.1, 0);
        w.mode = mode;
        w.label = mode_label(mode);
        w.source = std::string(mode_name(mode)) + std::to_string(k);
        ws.push_back(w);
      }
  DatasetMeta meta;
  meta.seed = 77;
  save_dataset(dir.string(), ws, meta);
  DatasetMeta back_meta;
  auto back = load_dataset(dir.string(), &back_meta);
  REQUIRE(back.size() == ws.size());
  CHECK(back_meta.seed == 77);
  CHECK(back_meta.counts[FailureMode::Speeding] == 6);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    CHECK(back[i].source == ws[i].source);
    CHECK(back[i].mode == ws[i].mode);
  }
  std::filesystem::remove_all(dir);
}
