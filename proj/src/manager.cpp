// SPDX-License-Identifier: Apache-2.0
#include "failnet/manager.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "failnet/baselines.hpp"
#include "failnet/rnn.hpp"

namespace failnet::manager {

namespace {

constexpr double kTimeTol = 1e-6;
constexpr std::size_t kMaxIdLength = 64;

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

bool valid_id(std::string_view id) {
  if (id.empty() || id.size() > kMaxIdLength) return false;
  return std::all_of(id.begin(), id.end(), [](char c) { return c > ' ' && c < 127; });
}

std::string check_id(std::string_view id) {
  if (!valid_id(id)) throw ProtocolError(kErrParse, "invalid vehicle id");
  return std::string(id);
}

double number(std::string_view s, const char* field) {
  auto v = parse_double(s);
  if (!v) throw ProtocolError(kErrParse, std::string("bad number for ") + field);
  return *v;
}

void expect_fields(const std::vector<std::string_view>& tok, std::size_t n, std::string_view cmd) {
  if (tok.size() != n)
    throw ProtocolError(kErrParse, std::string(cmd) + " expects " + std::to_string(n - 1) + " fields");
}

}  // namespace

// ---------------------------------------------------------------------------
// Protocol

std::string_view zone_name(Zone z) {
  switch (z) {
    case Zone::Outside: return "outside";
    case Zone::Approaching: return "approaching";
    case Zone::Masked: return "masked";
  }
  return "outside";
}

Zone parse_zone(std::string_view s) {
  if (s == "outside") return Zone::Outside;
  if (s == "approaching") return Zone::Approaching;
  if (s == "masked") return Zone::Masked;
  throw ProtocolError(kErrParse, "unknown zone '" + std::string(s) + "'");
}

std::string format_message(const Message& m) {
  struct Visitor {
    std::string operator()(const PoseMsg& p) const {
      return "POSE " + check_id(p.vehicle_id) + ' ' + fmt17(p.t) + ' ' + fmt17(p.x) + ' ' + fmt17(p.y) + ' ' +
             fmt17(p.theta);
    }
    std::string operator()(const WarnMsg& w) const {
      return "WARN " + check_id(w.target_id) + ' ' + check_id(w.offending_id) + ' ' + fmt17(w.z_hat) + ' ' +
             fmt17(w.t);
    }
    std::string operator()(const StatusMsg& s) const {
      return "STATUS " + check_id(s.vehicle_id) + ' ' + std::string(zone_name(s.zone)) + ' ' +
             std::to_string(s.buffer_len);
    }
    std::string operator()(const QueryMsg& q) const { return "QUERY " + check_id(q.vehicle_id); }
    std::string operator()(const ErrMsg& e) const {
      std::string text = e.text;
      std::replace_if(text.begin(), text.end(), [](char c) { return c == '\n' || c == '\r'; }, ' ');
      return "ERR " + std::to_string(e.code) + (text.empty() ? "" : " " + text);
    }
  };
  return std::visit(Visitor{}, m);
}

Message parse_message(std::string_view line) {
  while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.remove_suffix(1);
  const auto tok = split_ws(line);
  if (tok.empty()) throw ProtocolError(kErrParse, "empty line");
  const std::string_view cmd = tok[0];
  if (cmd == "POSE") {
    expect_fields(tok, 6, cmd);
    return PoseMsg{check_id(tok[1]), number(tok[2], "t"), number(tok[3], "x"), number(tok[4], "y"),
                   number(tok[5], "theta")};
  }
  if (cmd == "WARN") {
    expect_fields(tok, 5, cmd);
    return WarnMsg{check_id(tok[1]), check_id(tok[2]), number(tok[3], "z_hat"), number(tok[4], "t")};
  }
  if (cmd == "STATUS") {
    expect_fields(tok, 4, cmd);
    auto n = parse_int(tok[3]);
    if (!n || *n < 0) throw ProtocolError(kErrParse, "bad buffer length");
    return StatusMsg{check_id(tok[1]), parse_zone(tok[2]), static_cast<std::size_t>(*n)};
  }
  if (cmd == "QUERY") {
    expect_fields(tok, 2, cmd);
    return QueryMsg{check_id(tok[1])};
  }
  if (cmd == "ERR") {
    if (tok.size() < 2) throw ProtocolError(kErrParse, "ERR expects a code");
    auto code = parse_int(tok[1]);
    if (!code) throw ProtocolError(kErrParse, "bad error code");
    const auto rest = line.find(tok[1]) + tok[1].size();
    std::string_view text = line.substr(rest);
    while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
    return ErrMsg{static_cast<int>(*code), std::string(text)};
  }
  throw ProtocolError(kErrUnknownCommand, "unknown command '" + std::string(cmd.substr(0, 32)) + "'");
}

// ---------------------------------------------------------------------------
// Sessions

Zone classify_zone(const sim::TrackMap& map, double x, double y) {
  const double d = map.distance_to_center(x, y);
  if (d <= map.r_mask) return Zone::Masked;
  if (d <= map.r_enter) return Zone::Approaching;
  return Zone::Outside;
}

SessionTable::IngestResult SessionTable::ingest(const PoseMsg& msg, const sim::TrackMap& map) {
  IngestResult r;
  auto [it, inserted] = sessions_.try_emplace(msg.vehicle_id);
  VehicleSession& s = it->second;
  if (inserted) {
    s.vehicle_id = msg.vehicle_id;
    r.created = true;
  } else if (!s.buffer.empty() && !(msg.t > s.buffer.back().t)) {
    ++s.dropped;
    ++dropped_total_;
    return r;
  }
  s.buffer.push_back({msg.t, msg.x, msg.y, msg.theta});
  while (s.buffer.size() > L_) s.buffer.pop_front();
  s.zone = classify_zone(map, msg.x, msg.y);
  s.last_seen = msg.t;
  r.accepted = true;
  return r;
}

VehicleSession* SessionTable::find(const std::string& id) {
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : &it->second;
}

const VehicleSession* SessionTable::find(const std::string& id) const {
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : &it->second;
}

std::vector<std::string> SessionTable::evict_silent(double now, double timeout) {
  std::vector<std::string> gone;
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (it->second.last_seen < now - timeout) {
      gone.push_back(it->first);
      it = sessions_.erase(it);
    } else {
      ++it;
    }
  }
  return gone;
}

// ---------------------------------------------------------------------------
// Detection

Detector load_detector(const std::string& checkpoint_path) {
  std::ifstream is(checkpoint_path);
  if (!is) throw InvalidInput("cannot open checkpoint " + checkpoint_path);
  const nn::Checkpoint ckpt = nn::read_checkpoint(is);
  Detector d;
  if (ckpt.architecture == "failurenet") {
    auto model = std::make_shared<rnn::FailureNetModel>(rnn::from_checkpoint(ckpt));
    const auto kind = model->config.kind;
    d.name = kind == rnn::CellKind::LSTM ? "FailureNet-LSTM" : kind == rnn::CellKind::GRU ? "FailureNet-GRU"
                                                                                        : "FailureNet-CfC";
    d.L = model->config.L;
    d.score = [model](const data::PoseWindow& w) {
      return rnn::failurenet_forward(*model, data::featurize(w, model->config.feature_mode));
    };
  } else if (ckpt.architecture == "mlp") {
    auto model = std::make_shared<baselines::MlpDetector>(baselines::mlp_from_checkpoint(ckpt));
    d.name = "MLP-" + std::string(baselines::prefilter_name(model->prefilter));
    d.L = model->L;
    d.score = [model](const data::PoseWindow& w) { return model->predict(w); };
  } else {
    throw InvalidInput("checkpoint architecture '" + ckpt.architecture + "' cannot drive the manager");
  }
  return d;
}

data::PoseWindow session_window(const VehicleSession& s) {
  data::PoseWindow w;
  w.poses.assign(s.buffer.begin(), s.buffer.end());
  w.source = s.vehicle_id;
  return w;
}

std::optional<double> evaluate_vehicle(const VehicleSession& s, const Detector& det) {
  if (s.buffer.size() < det.L || s.zone == Zone::Masked) return std::nullopt;
  return det.score(session_window(s));
}

std::vector<WarnMsg> broadcast_warnings(const std::vector<std::pair<std::string, double>>& verdicts,
                                        const SessionTable& sessions, double z_bar, double t) {
  std::vector<WarnMsg> out;
  for (const auto& [offender, z] : verdicts) {
    if (!(z > z_bar)) continue;
    for (const auto& [id, s] : sessions.sessions()) {
      if (id == offender || s.zone != Zone::Approaching) continue;
      out.push_back({id, offender, z, t});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manager core

void ManagerConfig::validate() const {
  if (!(z_bar > 0.0 && z_bar < 1.0)) throw InvalidInput("manager: z_bar must lie in (0, 1)");
  if (L < 2) throw InvalidInput("manager: L must be >= 2");
  if (!(rate > 0.0)) throw InvalidInput("manager: rate must be > 0");
  if (!(eval_period > 0.0)) throw InvalidInput("manager: evaluation period must be > 0");
  if (!(session_timeout > 0.0)) throw InvalidInput("manager: session timeout must be > 0");
  if (port < 0 || port > 65535) throw InvalidInput("manager: port out of range");
  map.validate();
}

std::string format_event(const Evaluation& e) {
  std::string line = fmt9(e.t) + ' ' + e.vehicle_id + ' ' + fmt17(e.z_hat) + ' ' + std::string(zone_name(e.zone)) +
                     " warned:";
  if (e.warned.empty()) return line + '-';
  for (std::size_t i = 0; i < e.warned.size(); ++i) line += (i ? "," : "") + e.warned[i];
  return line;
}

IntersectionManager::IntersectionManager(ManagerConfig cfg, Detector det)
    : cfg_(std::move(cfg)), det_(std::move(det)), sessions_(cfg_.L) {
  cfg_.validate();
  if (!det_.score) throw InvalidInput("manager: detector has no scoring function");
  if (det_.L != cfg_.L)
    throw ProtocolError(kErrIncompatibleConfig, "detector expects L = " + std::to_string(det_.L) +
                                                    " but the manager is configured for L = " +
                                                    std::to_string(cfg_.L));
}

IntersectionManager::Output IntersectionManager::handle_line(std::string_view line) {
  Output out;
  Message msg;
  try {
    msg = parse_message(line);
  } catch (const ProtocolError& e) {
    ++parse_errors_;
    out.replies.push_back(ErrMsg{e.code(), e.what()});
    return out;
  }
  if (const auto* p = std::get_if<PoseMsg>(&msg)) {
    // Instants strictly before this pose are complete.
    if (next_tick_) {
      const double before = p->t - kTimeTol;
      if (before >= static_cast<double>(*next_tick_) * cfg_.eval_period) out.warnings = advance(before);
    }
    sessions_.ingest(*p, cfg_.map);
    stream_time_ = std::max(stream_time_, p->t);
    if (!next_tick_) next_tick_ = static_cast<long long>(std::ceil(p->t / cfg_.eval_period - kTimeTol));
    return out;
  }
  if (const auto* q = std::get_if<QueryMsg>(&msg)) {
    const VehicleSession* s = sessions_.find(q->vehicle_id);
    out.replies.push_back(StatusMsg{q->vehicle_id, s ? s->zone : Zone::Outside, s ? s->buffer.size() : 0});
    return out;
  }
  const char* kind = std::holds_alternative<WarnMsg>(msg) ? "WARN" : std::holds_alternative<StatusMsg>(msg) ? "STATUS"
                                                                                                         : "ERR";
  out.replies.push_back(ErrMsg{kErrUnknownCommand, std::string(kind) + " is not accepted by the manager"});
  return out;
}

std::vector<WarnMsg> IntersectionManager::advance(double now) {
  std::vector<WarnMsg> warnings;
  if (!next_tick_) return warnings;
  while (static_cast<double>(*next_tick_) * cfg_.eval_period <= now + kTimeTol) {
    auto w = evaluate_at(static_cast<double>(*next_tick_) * cfg_.eval_period);
    warnings.insert(warnings.end(), w.begin(), w.end());
    ++*next_tick_;
  }
  sessions_.evict_silent(now, cfg_.session_timeout);
  return warnings;
}

std::vector<WarnMsg> IntersectionManager::evaluate_at(double t) {
  std::vector<std::pair<std::string, double>> verdicts;
  std::vector<Evaluation> evals;
  for (const auto& [id, s] : sessions_.sessions()) {
    if (s.last_seen < t - cfg_.session_timeout) continue;
    auto z = evaluate_vehicle(s, det_);
    if (!z) continue;
    verdicts.emplace_back(id, *z);
    Evaluation e;
    e.t = t;
    e.vehicle_id = id;
    e.z_hat = *z;
    e.zone = s.zone;
    e.window = session_window(s);
    evals.push_back(std::move(e));
  }
  for (const auto& [id, z] : verdicts) sessions_.find(id)->last_verdict = z;
  auto warnings = broadcast_warnings(verdicts, sessions_, cfg_.z_bar, t);
  for (auto& e : evals) {
    for (const auto& w : warnings)
      if (w.offending_id == e.vehicle_id) e.warned.push_back(w.target_id);
    pending_log_.push_back(format_event(e));
    evaluations_.push_back(std::move(e));
  }
  return warnings;
}

std::vector<std::string> IntersectionManager::take_log_lines() {
  std::vector<std::string> out;
  out.swap(pending_log_);
  return out;
}

// ---------------------------------------------------------------------------
// Replay

namespace {

void record(sim::TrajectoryLog& log, const sim::VehicleState& s) {
  log.samples.push_back({s.pose.t, s.pose.x, s.pose.y, s.pose.theta, s.v, s.delta});
}

}  // namespace

ReplayRun replay_mode(FailureMode mode, const Detector& det, const ReplayConfig& cfg) {
  cfg.map.validate();
  if (!(cfg.duration > 0.0) || !(cfg.sim_dt > 0.0) || !(cfg.rate > 0.0))
    throw InvalidInput("replay: duration, time step and rate must be > 0");
  const double sample_steps = 1.0 / (cfg.rate * cfg.sim_dt);
  const double eval_steps = 1.0 / cfg.sim_dt;
  if (std::abs(sample_steps - std::round(sample_steps)) > 1e-9 || std::abs(eval_steps - std::round(eval_steps)) > 1e-9)
    throw InvalidInput("replay: time step must divide the sample and evaluation periods");
  const auto every_sample = static_cast<long long>(std::llround(sample_steps));
  const auto every_eval = static_cast<long long>(std::llround(eval_steps));

  const auto mode_index = static_cast<std::size_t>(mode);
  const std::size_t crossing = std::min<std::size_t>(4, cfg.map.routes.size());
  const std::size_t off_route = mode_index % crossing;
  const std::size_t comp_route = (off_route + crossing / 2) % crossing;

  ReplayRun run;
  run.mode = mode;
  run.offender_id = std::string(mode_name(mode)) + "-offender";
  run.companion_id = "nominal-companion";

  sim::FailureConfig off_cfg = cfg.failure;
  off_cfg.mode = mode;
  sim::FailureConfig comp_cfg = cfg.failure;
  comp_cfg.mode = FailureMode::Nominal;
  sim::Vehicle offender(cfg.map, off_route, off_cfg, derive_seed(cfg.seed, 2 * mode_index), run.offender_id);
  sim::Vehicle companion(cfg.map, comp_route, comp_cfg, derive_seed(cfg.seed, 2 * mode_index + 1), run.companion_id);

  ManagerConfig mc;
  mc.z_bar = cfg.z_bar;
  mc.L = det.L;
  mc.rate = cfg.rate;
  mc.map = cfg.map;
  IntersectionManager mgr(mc, det);

  run.offender_log.vehicle_id = run.offender_id;
  run.offender_log.mode = mode;
  run.companion_log.vehicle_id = run.companion_id;
  run.companion_log.mode = FailureMode::Nominal;
  record(run.offender_log, offender.state());
  record(run.companion_log, companion.state());

  bool off_alive = true, comp_alive = true;
  const auto steps = static_cast<long long>(std::llround(cfg.duration / cfg.sim_dt));
  for (long long k = 0; k <= steps; ++k) {
    if (k > 0) {
      if (off_alive) {
        offender.step(cfg.sim_dt);
        off_alive = offender.in_bounds();
        if (off_alive) record(run.offender_log, offender.state());
        else run.offender_log.truncated = true;
      }
      if (comp_alive) {
        companion.step(cfg.sim_dt);
        comp_alive = companion.in_bounds();
        if (comp_alive) record(run.companion_log, companion.state());
        else run.companion_log.truncated = true;
      }
    }
    if (k % every_sample != 0) continue;
    auto send = [&](const sim::Vehicle& v) {
      const auto& p = v.state().pose;
      auto out = mgr.handle_line(format_message(PoseMsg{v.id(), p.t, p.x, p.y, p.theta}));
      if (!out.replies.empty()) throw InvalidInput("replay: manager rejected a pose");
    };
    if (off_alive) send(offender);
    if (comp_alive) send(companion);
    if (k % every_eval != 0) continue;
    const std::size_t before = mgr.evaluations().size();
    for (const auto& w : mgr.advance(static_cast<double>(k / every_eval)))
      if (w.target_id == run.companion_id) ++run.warnings_to_companion;
    for (std::size_t i = before; i < mgr.evaluations().size(); ++i) {
      const double d = std::hypot(offender.state().pose.x - companion.state().pose.x,
                                  offender.state().pose.y - companion.state().pose.y);
      run.excluded.push_back(off_alive && comp_alive && d < cfg.handover_radius);
    }
  }
  run.evaluations = mgr.evaluations();
  run.event_log = mgr.take_log_lines();
  return run;
}

double ReplaySummary::overall() const {
  std::size_t c = 0, n = 0;
  for (const auto& [m, cn] : offender) {
    c += cn.first;
    n += cn.second;
  }
  return n ? static_cast<double>(c) / static_cast<double>(n) : 0.0;
}

double ReplaySummary::false_warning_rate() const {
  return nominal_evaluations ? static_cast<double>(nominal_false_warnings) / static_cast<double>(nominal_evaluations)
                             : 0.0;
}

ReplaySummary summarize(const std::vector<ReplayRun>& runs, double z_bar) {
  ReplaySummary s;
  for (const auto& run : runs) {
    auto& cell = s.offender[run.mode];
    for (std::size_t i = 0; i < run.evaluations.size(); ++i) {
      if (run.excluded[i]) continue;
      const auto& e = run.evaluations[i];
      const bool flagged = e.z_hat > z_bar;
      const bool is_offender = e.vehicle_id == run.offender_id;
      if (is_offender) {
        ++cell.second;
        if (flagged == (run.mode != FailureMode::Nominal)) ++cell.first;
      }
      if (!is_offender || run.mode == FailureMode::Nominal) {
        ++s.nominal_evaluations;
        if (flagged) ++s.nominal_false_warnings;
      }
    }
  }
  return s;
}

eval::EvalReport replay_report(const std::vector<ReplayRun>& runs, const Detector& det, std::size_t parameters,
                               double z_bar) {
  std::vector<double> z;
  std::vector<FailureMode> modes;
  for (const auto& run : runs)
    for (std::size_t i = 0; i < run.evaluations.size(); ++i)
      if (!run.excluded[i] && run.evaluations[i].vehicle_id == run.offender_id) {
        // Shift scores so that the report's fixed 0.5 cut matches z_bar.
        z.push_back(run.evaluations[i].z_hat > z_bar ? 1.0 : 0.0);
        modes.push_back(run.mode);
      }
  eval::EvalReport r;
  r.title = "Closed-loop replay accuracy (%)";
  r.methods.push_back(eval::score_method(det.name, parameters, z, modes));
  const auto s = summarize(runs, z_bar);
  r.metadata["z_bar"] = fmt9(z_bar);
  r.metadata["evaluation_rate_hz"] = "1";
  r.metadata["nominal_evaluations"] = std::to_string(s.nominal_evaluations);
  r.metadata["nominal_false_warning_rate"] = fmt9(s.false_warning_rate());
  std::size_t warned = 0;
  for (const auto& run : runs) warned += run.warnings_to_companion;
  r.metadata["warnings_to_companions"] = std::to_string(warned);
  return r;
}

std::size_t offline_mismatches(const ReplayRun& run, const Detector& det, const ReplayConfig& cfg) {
  std::size_t bad = 0;
  for (const auto* log : {&run.offender_log, &run.companion_log}) {
    const auto series = data::resample_poses(*log, cfg.rate);
    const auto windows = data::make_windows(series, det.L, 1, &cfg.map, log->mode, log->vehicle_id);
    std::map<long long, const data::PoseWindow*> on_tick;
    for (const auto& w : windows) {
      const double t = w.poses.back().t;
      const double r = std::round(t);
      if (std::abs(t - r) <= kTimeTol) on_tick[static_cast<long long>(r)] = &w;
    }
    std::size_t seen = 0;
    for (const auto& e : run.evaluations) {
      if (e.vehicle_id != log->vehicle_id) continue;
      ++seen;
      auto it = on_tick.find(std::llround(e.t));
      if (it == on_tick.end()) {
        ++bad;
        continue;
      }
      const double z = det.score(*it->second);
      if (std::bit_cast<std::uint64_t>(z) != std::bit_cast<std::uint64_t>(e.z_hat)) ++bad;
    }
    if (seen < on_tick.size()) bad += on_tick.size() - seen;
  }
  return bad;
}

}  // namespace failnet::manager
