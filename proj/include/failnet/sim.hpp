// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "failnet/core.hpp"
#include "failnet/rng.hpp"

namespace failnet::sim {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

struct VehicleState {
  Pose pose;
  double v = 0.0;      // m/s
  double delta = 0.0;  // steering angle, rad
};

struct ControlCommand {
  double v_cmd = 0.0;
  double delta_cmd = 0.0;
};

/// Kinematic bicycle geometry and actuator limits (1/10 scale).
struct VehicleParams {
  double wheelbase = 0.26;
  double delta_max = 0.4;
  double v_max = 0.8;
  double tau_v = 0.2;      // first-order speed lag, s; 0 means instant
  double tau_delta = 0.2;  // first-order steering lag, s; 0 means instant
};

/// Polyline route with cumulative arc length. Closed routes wrap around.
class Route {
 public:
  Route() = default;
  Route(std::vector<Vec2> points, bool closed, std::string name = {});

  const std::vector<Vec2>& points() const { return points_; }
  bool closed() const { return closed_; }
  const std::string& name() const { return name_; }
  double length() const { return cumulative_.empty() ? 0.0 : cumulative_.back(); }
  std::size_t segment_count() const { return closed_ ? points_.size() : points_.size() - 1; }

  /// Point at arc length s (wrapped for closed routes, clamped otherwise).
  Vec2 point_at(double s) const;
  /// Unit tangent at arc length s.
  Vec2 tangent_at(double s) const;

  struct Projection {
    double s = 0.0;         // arc length of the closest point
    double distance = 0.0;  // unsigned distance to the route
    double signed_offset = 0.0;  // positive to the left of travel
    std::size_t segment = 0;
  };
  /// Closest point over all segments.
  Projection project(Vec2 p) const;
  /// Closest point searching `window` segments either side of `hint`.
  Projection project_near(Vec2 p, std::size_t hint, std::size_t window) const;

 private:
  Projection project_segment(Vec2 p, std::size_t seg) const;
  std::pair<Vec2, Vec2> segment(std::size_t seg) const;

  std::vector<Vec2> points_;
  std::vector<double> cumulative_;  // arc length at each vertex, plus closing length
  bool closed_ = false;
  std::string name_;
};

struct TrackMap {
  std::vector<Route> routes;
  double lane_width = 0.3;
  Vec2 intersection_center{};
  double r_mask = 0.5;
  double r_enter = 1.5;
  double bounds = 3.0;  // |x|, |y| limit of the drivable area

  double distance_to_center(double x, double y) const;
  void validate() const;
};

/// Built-in map: a 4.8 m square road grid split by two crossing roads with
/// a single monitored 4-way intersection at the origin. Routes are closed
/// loops that cross the intersection straight, with a left turn, or with a
/// right turn.
TrackMap default_map();

/// Rounded-rectangle loop helper used to build routes.
Route rounded_loop(double x0, double y0, double x1, double y1, double corner_radius,
                   bool counter_clockwise, std::string name, double spacing = 0.02);

struct FailureConfig {
  FailureMode mode = FailureMode::Nominal;
  // periodic control noise
  double a_delta = 0.15;  // rad
  double t_delta = 4.0;   // s
  double t_v = 2.0;       // s
  double a = -0.15;       // m/s
  double b = 0.15;        // m/s
  // lane shift
  double s_bar = 0.1;  // m
  // speeding
  double v_speeding = 0.5;  // m/s
  // reckless surrogate
  double reckless_rate = 0.5;        // burst onsets per second of non-burst time
  double reckless_burst = 2.5;       // burst duration, s
  double reckless_steer_std = 0.25;  // stationary std of the OU steering term, rad
  double reckless_tau = 0.6;         // OU correlation time, s
  double reckless_speed_lo = 0.4;    // speed factor bounds drawn once per burst
  double reckless_speed_hi = 1.8;
  std::uint64_t seed = 0;

  void validate() const;
  /// Long-run fraction of time spent in reckless bursts.
  double reckless_duty_cycle() const;
};

struct SampleRow {
  double t = 0.0;
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
  double v = 0.0;
  double delta = 0.0;
};

struct ZoneEvent {
  double t = 0.0;
  bool entered = false;  // true: entered mask disc, false: exited
};

struct TrajectoryLog {
  std::string vehicle_id;
  FailureMode mode = FailureMode::Nominal;
  std::vector<SampleRow> samples;
  std::vector<ZoneEvent> events;
  bool truncated = false;  // vehicle left the map bounds
};

/// Advances the kinematic bicycle model by dt. Speed and steering follow
/// their commands through first-order lags and are clamped to the limits.
VehicleState step_vehicle(const VehicleState& state, const ControlCommand& cmd, double dt,
                          const VehicleParams& params);

struct TrackingParams {
  double lookahead = 0.2;     // m
  double target_speed = 0.3;  // m/s
};

/// Pure-pursuit lateral control at constant target speed. Open routes
/// command zero speed once the vehicle reaches the end.
ControlCommand track_control(const VehicleState& state, const Route& route,
                             const TrackingParams& params, double wheelbase = 0.26);

/// Same as track_control but with a precomputed projection of the vehicle.
ControlCommand track_control(const VehicleState& state, const Route& route,
                             const Route::Projection& where, const TrackingParams& params,
                             double wheelbase);

struct ControlNoise {
  double eps_delta = 0.0;
  double eps_v = 0.0;
};

/// Sample-and-hold state for the speed noise.
struct HoldState {
  explicit HoldState(std::uint64_t seed) : rng(seed) {}
  Rng rng;
  long long interval = -1;
  double value = 0.0;
};

/// Sinusoidal steering noise plus held uniform speed noise.
ControlNoise periodic_noise(double t, const FailureConfig& cfg, HoldState& hold);

ControlCommand inject_control_failure(const ControlCommand& cmd, const ControlNoise& eps);

/// Offsets every waypoint by s_bar/2 along the local left normal.
Route shift_centerline(const Route& route, double s_bar);

ControlCommand speeding_override(const ControlCommand& cmd, const FailureConfig& cfg);

/// Seeded surrogate for a reckless human driver: alternates between
/// pass-through periods and bursts of Ornstein-Uhlenbeck steering
/// perturbation with a surge or brake speed factor.
class RecklessPolicy {
 public:
  RecklessPolicy(const FailureConfig& cfg, std::uint64_t seed);

  ControlCommand command(const ControlCommand& nominal, double dt);
  bool in_burst() const { return burst_left_ > 0.0; }

 private:
  FailureConfig cfg_;
  Rng rng_;
  double burst_left_ = 0.0;
  double ou_ = 0.0;
  double speed_factor_ = 1.0;
};

/// One simulated vehicle: controller, failure injector and dynamics.
class Vehicle {
 public:
  Vehicle(const TrackMap& map, std::size_t route_index, const FailureConfig& cfg,
          std::uint64_t seed, std::string vehicle_id, double start_fraction = -1.0);

  /// Advances by dt and returns the new state.
  const VehicleState& step(double dt);

  const VehicleState& state() const { return state_; }
  double time() const { return time_; }
  const Route& path() const { return path_; }
  const Route& nominal_route() const { return route_; }
  const std::string& id() const { return id_; }
  FailureMode mode() const { return cfg_.mode; }
  bool in_bounds() const;

  /// Cross-track error relative to the unshifted route centerline.
  double cross_track_error() const;
  /// Signed lateral offset from the unshifted centerline, positive left.
  double signed_offset() const;
  const Route::Projection& nominal_projection() const { return nominal_; }

  VehicleParams params;
  TrackingParams tracking;

 private:
  double bounds_;
  Route route_;  // nominal centerline
  Route path_;   // centerline the vehicle actually tracks
  FailureConfig cfg_;
  VehicleState state_;
  HoldState hold_;
  RecklessPolicy reckless_;
  std::size_t hint_ = 0;
  Route::Projection nominal_{};
  long long step_count_ = 0;
  double time_ = 0.0;
  std::string id_;
};

struct ScenarioOptions {
  std::size_t route = 0;
  std::string vehicle_id = "v0";
  double dt = 0.02;
  double start_fraction = -1.0;  // < 0: drawn from the seed
};

/// Runs one vehicle for `duration` seconds and records every integration
/// sample. Deterministic in (map, cfg, duration, seed, options).
TrajectoryLog run_scenario(const TrackMap& map, const FailureConfig& cfg, double duration,
                           std::uint64_t seed, const ScenarioOptions& options = {});

void write_log(std::ostream& os, const TrajectoryLog& log);
TrajectoryLog read_log(std::istream& is);

}  // namespace failnet::sim
