// SPDX-License-Identifier: Apache-2.0
#include "failnet/sim.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>

namespace failnet::sim {

namespace {

constexpr double kPi = std::numbers::pi;

double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }

bool finite_state(const VehicleState& s) {
  return std::isfinite(s.pose.x) && std::isfinite(s.pose.y) && std::isfinite(s.pose.theta) &&
         std::isfinite(s.v) && std::isfinite(s.delta) && std::isfinite(s.pose.t);
}

double lag_gain(double dt, double tau) { return tau > 0.0 ? 1.0 - std::exp(-dt / tau) : 1.0; }

}  // namespace

// ---------------------------------------------------------------------------
// Route

Route::Route(std::vector<Vec2> points, bool closed, std::string name)
    : points_(std::move(points)), closed_(closed), name_(std::move(name)) {
  if (points_.size() < 2) throw InvalidInput("route needs at least 2 points");
  cumulative_.reserve(points_.size() + 1);
  cumulative_.push_back(0.0);
  const std::size_t n = segment_count();
  for (std::size_t i = 0; i < n; ++i) {
    auto [a, b] = segment(i);
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    if (!(len > 1e-12))
      throw InvalidInput("degenerate route: repeated point at index " + std::to_string(i));
    cumulative_.push_back(cumulative_.back() + len);
  }
}

std::pair<Vec2, Vec2> Route::segment(std::size_t seg) const {
  const std::size_t j = (seg + 1) % points_.size();
  return {points_[seg], points_[j]};
}

Vec2 Route::point_at(double s) const {
  const double total = length();
  if (closed_) {
    s = std::fmod(s, total);
    if (s < 0) s += total;
  } else {
    s = std::clamp(s, 0.0, total);
  }
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), s);
  std::size_t seg = it == cumulative_.begin() ? 0 : static_cast<std::size_t>(it - cumulative_.begin()) - 1;
  seg = std::min(seg, segment_count() - 1);
  auto [a, b] = segment(seg);
  const double len = cumulative_[seg + 1] - cumulative_[seg];
  const double u = std::clamp((s - cumulative_[seg]) / len, 0.0, 1.0);
  return {a.x + u * (b.x - a.x), a.y + u * (b.y - a.y)};
}

Vec2 Route::tangent_at(double s) const {
  const double total = length();
  if (closed_) {
    s = std::fmod(s, total);
    if (s < 0) s += total;
  } else {
    s = std::clamp(s, 0.0, total);
  }
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), s);
  std::size_t seg = it == cumulative_.begin() ? 0 : static_cast<std::size_t>(it - cumulative_.begin()) - 1;
  seg = std::min(seg, segment_count() - 1);
  auto [a, b] = segment(seg);
  const double len = cumulative_[seg + 1] - cumulative_[seg];
  return {(b.x - a.x) / len, (b.y - a.y) / len};
}

Route::Projection Route::project_segment(Vec2 p, std::size_t seg) const {
  auto [a, b] = segment(seg);
  const Vec2 ab{b.x - a.x, b.y - a.y};
  const double len = cumulative_[seg + 1] - cumulative_[seg];
  const double u = std::clamp(((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / (len * len), 0.0, 1.0);
  const Vec2 q{a.x + u * ab.x, a.y + u * ab.y};
  const Vec2 d{p.x - q.x, p.y - q.y};
  Projection out;
  out.s = cumulative_[seg] + u * len;
  out.distance = std::hypot(d.x, d.y);
  out.signed_offset = cross(Vec2{ab.x / len, ab.y / len}, d);
  out.segment = seg;
  return out;
}

Route::Projection Route::project(Vec2 p) const {
  Projection best;
  best.distance = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < segment_count(); ++i) {
    auto pr = project_segment(p, i);
    if (pr.distance < best.distance) best = pr;
  }
  return best;
}

Route::Projection Route::project_near(Vec2 p, std::size_t hint, std::size_t window) const {
  const std::size_t n = segment_count();
  if (2 * window + 1 >= n) return project(p);
  Projection best;
  best.distance = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k <= 2 * window; ++k) {
    std::size_t seg;
    if (closed_) {
      seg = (hint + n - window + k) % n;
    } else {
      const long long s = static_cast<long long>(hint) - static_cast<long long>(window) +
                          static_cast<long long>(k);
      if (s < 0 || s >= static_cast<long long>(n)) continue;
      seg = static_cast<std::size_t>(s);
    }
    auto pr = project_segment(p, seg);
    if (pr.distance < best.distance) best = pr;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Map

double TrackMap::distance_to_center(double x, double y) const {
  return std::hypot(x - intersection_center.x, y - intersection_center.y);
}

void TrackMap::validate() const {
  if (routes.empty()) throw InvalidInput("map has no routes");
  if (!(r_mask < r_enter)) throw InvalidInput("map requires r_mask < r_enter");
  for (const auto& r : routes) {
    if (r.points().size() < 2) throw InvalidInput("route " + r.name() + " has < 2 points");
    if (r.project(intersection_center).distance >= r_mask)
      throw InvalidInput("route " + r.name() + " does not pass through the mask zone");
  }
}

Route rounded_loop(double x0, double y0, double x1, double y1, double r, bool ccw,
                   std::string name, double spacing) {
  if (!(x1 - x0 > 2 * r) || !(y1 - y0 > 2 * r))
    throw InvalidInput("rounded_loop: corner radius too large for rectangle");
  std::vector<Vec2> pts;
  auto straight = [&](Vec2 a, Vec2 b) {
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    const int n = std::max(1, static_cast<int>(std::ceil(len / spacing)));
    for (int i = 0; i < n; ++i) {
      const double u = static_cast<double>(i) / n;
      pts.push_back({a.x + u * (b.x - a.x), a.y + u * (b.y - a.y)});
    }
  };
  auto arc = [&](Vec2 c, double a0) {
    const int n = std::max(2, static_cast<int>(std::ceil(0.5 * kPi * r / spacing)));
    for (int i = 0; i < n; ++i) {
      const double a = a0 + 0.5 * kPi * static_cast<double>(i) / n;
      pts.push_back({c.x + r * std::cos(a), c.y + r * std::sin(a)});
    }
  };
  // Counter-clockwise, starting at the middle of the bottom side.
  const double xm = 0.5 * (x0 + x1);
  straight({xm, y0}, {x1 - r, y0});
  arc({x1 - r, y0 + r}, -0.5 * kPi);
  straight({x1, y0 + r}, {x1, y1 - r});
  arc({x1 - r, y1 - r}, 0.0);
  straight({x1 - r, y1}, {x0 + r, y1});
  arc({x0 + r, y1 - r}, 0.5 * kPi);
  straight({x0, y1 - r}, {x0, y0 + r});
  arc({x0 + r, y0 + r}, kPi);
  straight({x0 + r, y0}, {xm, y0});
  if (!ccw) std::reverse(pts.begin() + 1, pts.end());
  return Route(std::move(pts), true, std::move(name));
}

TrackMap default_map() {
  TrackMap map;
  const double e = 2.4;              // perimeter road axis
  const double h = 0.5 * map.lane_width;  // lane center offset from road axis
  const double r_outer = 0.8;
  const double r_inner = 0.65;
  // Straight through the intersection: counter-clockwise half-block loops,
  // lanes offset outward (right-hand traffic).
  map.routes.push_back(rounded_loop(-e - h, -h, e + h, e + h, r_outer, true, "straight_east"));
  map.routes.push_back(rounded_loop(-e - h, -e - h, e + h, h, r_outer, true, "straight_west"));
  map.routes.push_back(rounded_loop(-h, -e - h, e + h, e + h, r_outer, true, "straight_south"));
  map.routes.push_back(rounded_loop(-e - h, -e - h, h, e + h, r_outer, true, "straight_north"));
  // Left turn at the intersection: counter-clockwise quadrant loops.
  map.routes.push_back(rounded_loop(-h, -h, e + h, e + h, r_outer, true, "left_ne"));
  map.routes.push_back(rounded_loop(-e - h, -h, h, e + h, r_outer, true, "left_nw"));
  map.routes.push_back(rounded_loop(-e - h, -e - h, h, h, r_outer, true, "left_sw"));
  map.routes.push_back(rounded_loop(-h, -e - h, e + h, h, r_outer, true, "left_se"));
  // Right turn at the intersection: clockwise quadrant loops, lanes inward.
  map.routes.push_back(rounded_loop(h, h, e - h, e - h, r_inner, false, "right_ne"));
  map.routes.push_back(rounded_loop(-e + h, h, -h, e - h, r_inner, false, "right_nw"));
  map.routes.push_back(rounded_loop(-e + h, -e + h, -h, -h, r_inner, false, "right_sw"));
  map.routes.push_back(rounded_loop(h, -e + h, e - h, -h, r_inner, false, "right_se"));
  map.validate();
  return map;
}

// ---------------------------------------------------------------------------
// Failure config

void FailureConfig::validate() const {
  if (!(a <= b)) throw InvalidInput("failure config requires a <= b");
  if (!(t_delta > 0)) throw InvalidInput("failure config requires T_delta > 0");
  if (!(t_v > 0)) throw InvalidInput("failure config requires T_v > 0");
  if (!(s_bar >= 0)) throw InvalidInput("failure config requires s_bar >= 0");
  if (!(reckless_rate >= 0) || !(reckless_burst > 0) || !(reckless_tau > 0) ||
      !(reckless_steer_std >= 0) || !(reckless_speed_lo <= reckless_speed_hi))
    throw InvalidInput("invalid reckless parameters");
}

double FailureConfig::reckless_duty_cycle() const {
  const double x = reckless_rate * reckless_burst;
  return x / (1.0 + x);
}

// ---------------------------------------------------------------------------
// Dynamics and control

VehicleState step_vehicle(const VehicleState& state, const ControlCommand& cmd, double dt,
                          const VehicleParams& p) {
  if (!(dt > 0) || !std::isfinite(dt)) throw InvalidInput("step_vehicle: dt must be > 0");
  if (!finite_state(state)) throw InvalidInput("step_vehicle: non-finite vehicle state");
  if (!std::isfinite(cmd.v_cmd) || !std::isfinite(cmd.delta_cmd))
    throw InvalidInput("step_vehicle: non-finite command");

  VehicleState next = state;
  const double v_target = std::clamp(cmd.v_cmd, 0.0, p.v_max);
  const double d_target = std::clamp(cmd.delta_cmd, -p.delta_max, p.delta_max);
  next.v = std::clamp(state.v + lag_gain(dt, p.tau_v) * (v_target - state.v), 0.0, p.v_max);
  next.delta = std::clamp(state.delta + lag_gain(dt, p.tau_delta) * (d_target - state.delta),
                          -p.delta_max, p.delta_max);

  // Exact integration for speed and steering held over the step.
  const double th = state.pose.theta;
  const double omega = next.v / p.wheelbase * std::tan(next.delta);
  if (std::abs(omega) < 1e-12) {
    next.pose.x += next.v * std::cos(th) * dt;
    next.pose.y += next.v * std::sin(th) * dt;
  } else {
    const double th1 = th + omega * dt;
    next.pose.x += next.v / omega * (std::sin(th1) - std::sin(th));
    next.pose.y += next.v / omega * (std::cos(th) - std::cos(th1));
  }
  next.pose.theta = wrap_angle(th + omega * dt);
  next.pose.t = state.pose.t + dt;
  return next;
}

ControlCommand track_control(const VehicleState& state, const Route& route,
                             const TrackingParams& params, double wheelbase) {
  if (route.points().empty()) throw InvalidInput("track_control: empty route");
  if (!finite_state(state)) throw InvalidInput("track_control: non-finite state");
  return track_control(state, route, route.project({state.pose.x, state.pose.y}), params,
                       wheelbase);
}

ControlCommand track_control(const VehicleState& state, const Route& route,
                             const Route::Projection& where, const TrackingParams& params,
                             double wheelbase) {
  if (!route.closed() && where.s >= route.length() - 1e-6) return {0.0, 0.0};
  double target_s = where.s + params.lookahead;
  if (!route.closed()) target_s = std::min(target_s, route.length());
  const Vec2 target = route.point_at(target_s);
  const double dx = target.x - state.pose.x;
  const double dy = target.y - state.pose.y;
  const double ld = std::hypot(dx, dy);
  if (ld < 1e-9) return {params.target_speed, 0.0};
  const double alpha = wrap_angle(std::atan2(dy, dx) - state.pose.theta);
  return {params.target_speed, std::atan2(2.0 * wheelbase * std::sin(alpha), ld)};
}

// ---------------------------------------------------------------------------
// Failure injectors

ControlNoise periodic_noise(double t, const FailureConfig& cfg, HoldState& hold) {
  ControlNoise eps;
  eps.eps_delta = cfg.a_delta * std::sin(2.0 * kPi * t / cfg.t_delta);
  const auto k = static_cast<long long>(std::floor(t / cfg.t_v));
  if (k != hold.interval) {
    hold.interval = k;
    hold.value = hold.rng.uniform(cfg.a, cfg.b);
  }
  eps.eps_v = hold.value;
  return eps;
}

ControlCommand inject_control_failure(const ControlCommand& cmd, const ControlNoise& eps) {
  return {cmd.v_cmd + eps.eps_v, cmd.delta_cmd + eps.eps_delta};
}

Route shift_centerline(const Route& route, double s_bar) {
  if (!(s_bar >= 0)) throw InvalidInput("shift_centerline: s_bar must be >= 0");
  const auto& pts = route.points();
  if (s_bar == 0.0) return route;
  const std::size_t n = pts.size();
  const double d = 0.5 * s_bar;
  auto unit = [](Vec2 a, Vec2 b) {
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    return Vec2{(b.x - a.x) / len, (b.y - a.y) / len};
  };
  std::vector<Vec2> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec2 t{0.0, 0.0};
    const bool has_prev = route.closed() || i > 0;
    const bool has_next = route.closed() || i + 1 < n;
    if (has_prev) {
      const Vec2 u = unit(pts[(i + n - 1) % n], pts[i]);
      t.x += u.x;
      t.y += u.y;
    }
    if (has_next) {
      const Vec2 u = unit(pts[i], pts[(i + 1) % n]);
      t.x += u.x;
      t.y += u.y;
    }
    const double tl = std::hypot(t.x, t.y);
    if (tl < 1e-9) throw InvalidInput("shift_centerline: route reverses at index " + std::to_string(i));
    out[i] = {pts[i].x - d * t.y / tl, pts[i].y + d * t.x / tl};
  }
  return Route(std::move(out), route.closed(), route.name() + "_shifted");
}

ControlCommand speeding_override(const ControlCommand& cmd, const FailureConfig& cfg) {
  return {cfg.v_speeding, cmd.delta_cmd};
}

RecklessPolicy::RecklessPolicy(const FailureConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {}

ControlCommand RecklessPolicy::command(const ControlCommand& nominal, double dt) {
  if (burst_left_ <= 0.0) {
    const double p_onset = 1.0 - std::exp(-cfg_.reckless_rate * dt);
    if (rng_.uniform() < p_onset) {
      burst_left_ = cfg_.reckless_burst;
      speed_factor_ = rng_.uniform(cfg_.reckless_speed_lo, cfg_.reckless_speed_hi);
      ou_ = cfg_.reckless_steer_std * rng_.normal();
    }
  }
  if (burst_left_ <= 0.0) return nominal;
  const double decay = std::exp(-dt / cfg_.reckless_tau);
  ou_ = ou_ * decay + cfg_.reckless_steer_std * std::sqrt(1.0 - decay * decay) * rng_.normal();
  burst_left_ -= dt;
  return {nominal.v_cmd * speed_factor_, nominal.delta_cmd + ou_};
}

// ---------------------------------------------------------------------------
// Vehicle

Vehicle::Vehicle(const TrackMap& map, std::size_t route_index, const FailureConfig& cfg,
                 std::uint64_t seed, std::string vehicle_id, double start_fraction)
    : bounds_(map.bounds),
      cfg_(cfg),
      hold_(derive_seed(seed, 1)),
      reckless_(cfg, derive_seed(seed, 2)),
      id_(std::move(vehicle_id)) {
  cfg_.validate();
  if (route_index >= map.routes.size()) throw InvalidInput("route index out of range");
  route_ = map.routes[route_index];
  path_ = cfg_.mode == FailureMode::LaneShift ? shift_centerline(route_, cfg_.s_bar) : route_;
  if (start_fraction < 0.0) start_fraction = Rng(derive_seed(seed, 3)).uniform();
  const double s0 = start_fraction * path_.length();
  const Vec2 p0 = path_.point_at(s0);
  const Vec2 t0 = path_.tangent_at(s0);
  state_.pose = {0.0, p0.x, p0.y, std::atan2(t0.y, t0.x)};
  state_.v = tracking.target_speed;
  auto where = path_.project(p0);
  hint_ = where.segment;
  state_.delta = std::clamp(track_control(state_, path_, where, tracking, params.wheelbase).delta_cmd,
                            -params.delta_max, params.delta_max);
  nominal_ = route_.project(p0);
}

bool Vehicle::in_bounds() const {
  return std::abs(state_.pose.x) <= bounds_ && std::abs(state_.pose.y) <= bounds_;
}

const VehicleState& Vehicle::step(double dt) {
  const Vec2 p{state_.pose.x, state_.pose.y};
  auto where = path_.project_near(p, hint_, 40);
  if (where.distance > 0.5) where = path_.project(p);
  hint_ = where.segment;
  ControlCommand cmd = track_control(state_, path_, where, tracking, params.wheelbase);
  switch (cfg_.mode) {
    case FailureMode::PeriodicControl:
      cmd = inject_control_failure(cmd, periodic_noise(time_, cfg_, hold_));
      break;
    case FailureMode::Speeding: cmd = speeding_override(cmd, cfg_); break;
    case FailureMode::Reckless: cmd = reckless_.command(cmd, dt); break;
    case FailureMode::Nominal:
    case FailureMode::LaneShift: break;
  }
  state_ = step_vehicle(state_, cmd, dt, params);
  ++step_count_;
  // Integer step count keeps timestamps free of accumulated rounding.
  time_ = static_cast<double>(step_count_) * dt;
  state_.pose.t = time_;
  const Vec2 q{state_.pose.x, state_.pose.y};
  nominal_ = route_.project_near(q, nominal_.segment, 40);
  if (nominal_.distance > 0.5) nominal_ = route_.project(q);
  return state_;
}

double Vehicle::cross_track_error() const { return nominal_.distance; }
double Vehicle::signed_offset() const { return nominal_.signed_offset; }

// ---------------------------------------------------------------------------
// Scenario

TrajectoryLog run_scenario(const TrackMap& map, const FailureConfig& cfg, double duration,
                           std::uint64_t seed, const ScenarioOptions& options) {
  if (!(duration > 0)) throw InvalidInput("run_scenario: duration must be > 0");
  if (!(options.dt > 0)) throw InvalidInput("run_scenario: dt must be > 0");
  Vehicle vehicle(map, options.route, cfg, seed, options.vehicle_id, options.start_fraction);
  TrajectoryLog log;
  log.vehicle_id = options.vehicle_id;
  log.mode = cfg.mode;
  const auto steps = static_cast<long long>(std::llround(duration / options.dt));
  log.samples.reserve(static_cast<std::size_t>(steps) + 1);
  auto record = [&](const VehicleState& s) {
    log.samples.push_back({s.pose.t, s.pose.x, s.pose.y, s.pose.theta, s.v, s.delta});
  };
  record(vehicle.state());
  bool inside = map.distance_to_center(vehicle.state().pose.x, vehicle.state().pose.y) <= map.r_mask;
  if (inside) log.events.push_back({0.0, true});
  for (long long k = 0; k < steps; ++k) {
    const auto& s = vehicle.step(options.dt);
    if (!vehicle.in_bounds()) {
      log.truncated = true;
      break;
    }
    record(s);
    const bool now_inside = map.distance_to_center(s.pose.x, s.pose.y) <= map.r_mask;
    if (now_inside != inside) log.events.push_back({s.pose.t, now_inside});
    inside = now_inside;
  }
  return log;
}

void write_log(std::ostream& os, const TrajectoryLog& log) {
  os << "t,x,y,theta,v,delta,mode,vehicle_id\n";
  const auto mode = mode_name(log.mode);
  for (const auto& r : log.samples) {
    os << fmt9(r.t) << ',' << fmt9(r.x) << ',' << fmt9(r.y) << ',' << fmt9(r.theta) << ','
       << fmt9(r.v) << ',' << fmt9(r.delta) << ',' << mode << ',' << log.vehicle_id << '\n';
  }
}

TrajectoryLog read_log(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "t,x,y,theta,v,delta,mode,vehicle_id")
    throw FormatError("trajectory log: bad header");
  TrajectoryLog log;
  std::size_t lineno = 1;
  bool first = true;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    if (f.size() != 8) throw FormatError("trajectory log: line " + std::to_string(lineno) + ": expected 8 fields");
    SampleRow r;
    double* dst[] = {&r.t, &r.x, &r.y, &r.theta, &r.v, &r.delta};
    for (int i = 0; i < 6; ++i) {
      auto v = parse_double(f[static_cast<std::size_t>(i)]);
      if (!v) throw FormatError("trajectory log: line " + std::to_string(lineno) + ": bad number");
      *dst[i] = *v;
    }
    auto mode = parse_mode(f[6]);
    if (!mode) throw FormatError("trajectory log: line " + std::to_string(lineno) + ": bad mode");
    if (first) {
      log.mode = *mode;
      log.vehicle_id = f[7];
      first = false;
    } else if (*mode != log.mode || f[7] != log.vehicle_id) {
      throw FormatError("trajectory log: mode or vehicle changes mid-log at line " + std::to_string(lineno));
    }
    if (!log.samples.empty() && !(r.t > log.samples.back().t))
      throw FormatError("trajectory log: timestamps not increasing at line " + std::to_string(lineno));
    log.samples.push_back(r);
  }
  return log;
}

}  // namespace failnet::sim
