// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <variant>
#include <vector>

#include "failnet/data.hpp"
#include "failnet/eval.hpp"
#include "failnet/sim.hpp"

namespace failnet::manager {

// --- wire protocol ----------------------------------------------------------

enum class Zone { Outside, Approaching, Masked };

std::string_view zone_name(Zone z);
Zone parse_zone(std::string_view s);

struct PoseMsg {
  std::string vehicle_id;
  double t = 0, x = 0, y = 0, theta = 0;
  bool operator==(const PoseMsg&) const = default;
};
struct WarnMsg {
  std::string target_id;
  std::string offending_id;
  double z_hat = 0;
  double t = 0;
  bool operator==(const WarnMsg&) const = default;
};
struct StatusMsg {
  std::string vehicle_id;
  Zone zone = Zone::Outside;
  std::size_t buffer_len = 0;
  bool operator==(const StatusMsg&) const = default;
};
struct QueryMsg {
  std::string vehicle_id;
  bool operator==(const QueryMsg&) const = default;
};
struct ErrMsg {
  int code = 1;
  std::string text;
  bool operator==(const ErrMsg&) const = default;
};

using Message = std::variant<PoseMsg, WarnMsg, StatusMsg, QueryMsg, ErrMsg>;

enum ErrCode : int { kErrParse = 1, kErrUnknownCommand = 2, kErrIncompatibleConfig = 3 };

/// Protocol failure carrying its ERR code.
class ProtocolError : public std::runtime_error {
 public:
  ProtocolError(int code, const std::string& what) : std::runtime_error(what), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

/// One line without the trailing newline. Numbers use 17 significant digits.
std::string format_message(const Message& m);
/// Parses one line (a trailing '\r' or '\n' is ignored). Throws ProtocolError.
Message parse_message(std::string_view line);

// --- sessions ---------------------------------------------------------------

Zone classify_zone(const sim::TrackMap& map, double x, double y);

struct VehicleSession {
  std::string vehicle_id;
  std::deque<Pose> buffer;  // oldest first, at most L
  std::optional<double> last_verdict;
  Zone zone = Zone::Outside;
  double last_seen = 0;
  std::size_t dropped = 0;
};

class SessionTable {
 public:
  explicit SessionTable(std::size_t L) : L_(L) {}

  struct IngestResult {
    bool created = false;
    bool accepted = false;
  };
  IngestResult ingest(const PoseMsg& msg, const sim::TrackMap& map);

  VehicleSession* find(const std::string& id);
  const VehicleSession* find(const std::string& id) const;
  /// Removes sessions whose last pose is older than now - timeout.
  std::vector<std::string> evict_silent(double now, double timeout);
  std::size_t size() const { return sessions_.size(); }
  std::size_t dropped_total() const { return dropped_total_; }
  std::size_t L() const { return L_; }
  const std::map<std::string, VehicleSession>& sessions() const { return sessions_; }

 private:
  std::size_t L_;
  std::map<std::string, VehicleSession> sessions_;
  std::size_t dropped_total_ = 0;
};

// --- detection --------------------------------------------------------------

/// Read-only scoring function over an L-pose window.
struct Detector {
  std::string name;
  std::size_t L = 10;
  std::function<double(const data::PoseWindow&)> score;
};

/// Loads a FailureNet or MLP checkpoint as a detector.
Detector load_detector(const std::string& checkpoint_path);

data::PoseWindow session_window(const VehicleSession& s);

/// z_hat for a full, unmasked buffer; nullopt otherwise.
std::optional<double> evaluate_vehicle(const VehicleSession& s, const Detector& det);

/// One event per (offender with z_hat > z_bar, other vehicle approaching).
std::vector<WarnMsg> broadcast_warnings(const std::vector<std::pair<std::string, double>>& verdicts,
                                        const SessionTable& sessions, double z_bar, double t);

// --- manager core -----------------------------------------------------------

struct ManagerConfig {
  std::string checkpoint;
  double z_bar = 0.5;
  std::size_t L = 10;
  double rate = 2.0;
  double eval_period = 1.0;
  double session_timeout = 10.0;
  sim::TrackMap map = sim::default_map();
  std::string host = "127.0.0.1";
  int port = 0;
  std::string event_log;
  double heartbeat_seconds = 5.0;

  void validate() const;
};

struct Evaluation {
  double t = 0;
  std::string vehicle_id;
  double z_hat = 0;
  Zone zone = Zone::Outside;
  std::vector<std::string> warned;
  data::PoseWindow window;
};

std::string format_event(const Evaluation& e);

/// Protocol-level manager driven by stream time (the largest pose
/// timestamp seen). Not thread-safe; the server serialises access.
class IntersectionManager {
 public:
  /// Throws ProtocolError(kErrIncompatibleConfig) when detector and config
  /// disagree on L.
  IntersectionManager(ManagerConfig cfg, Detector det);

  struct Output {
    std::vector<Message> replies;  // to the sender
    std::vector<WarnMsg> warnings;  // routed to target vehicles
  };

  /// Handles one inbound line. POSE may trigger evaluations when stream
  /// time crosses the next evaluation instant.
  Output handle_line(std::string_view line);
  /// Runs every evaluation instant <= now (within 1e-6 s).
  std::vector<WarnMsg> advance(double now);
  /// Evaluates all sessions at time t unconditionally.
  std::vector<WarnMsg> evaluate_at(double t);

  const SessionTable& sessions() const { return sessions_; }
  const std::vector<Evaluation>& evaluations() const { return evaluations_; }
  const ManagerConfig& config() const { return cfg_; }
  std::size_t parse_errors() const { return parse_errors_; }
  double stream_time() const { return stream_time_; }
  /// Event-log lines emitted since the last call.
  std::vector<std::string> take_log_lines();

 private:
  ManagerConfig cfg_;
  Detector det_;
  SessionTable sessions_;
  std::vector<Evaluation> evaluations_;
  std::vector<std::string> pending_log_;
  std::optional<long long> next_tick_;
  double stream_time_ = -1e300;
  std::size_t parse_errors_ = 0;
};

// --- TCP server -------------------------------------------------------------

class Server {
 public:
  Server(ManagerConfig cfg, Detector det);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and starts accepting. Throws on bind/listen failure.
  void start();
  int port() const { return port_; }
  /// Closes every socket, joins threads and flushes the event log.
  void stop();
  bool running() const { return running_; }
  /// Writes a heartbeat line when no evaluation happened recently.
  void heartbeat();

  std::size_t evaluation_count();

 private:
  struct Client;
  void accept_loop();
  void client_loop(std::shared_ptr<Client> c);
  void send_line(Client& c, const std::string& line);
  void write_log(const std::vector<std::string>& lines);

  IntersectionManager mgr_;
  std::mutex mu_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  std::vector<std::shared_ptr<Client>> clients_;
  std::map<std::string, std::weak_ptr<Client>> routes_;  // vehicle id -> connection
  std::unique_ptr<std::ostream> log_;
  std::size_t logged_evaluations_ = 0;
};

/// Minimal blocking line client used by tests and the replay harness.
class LineClient {
 public:
  LineClient(const std::string& host, int port);
  ~LineClient();
  LineClient(const LineClient&) = delete;
  LineClient& operator=(const LineClient&) = delete;

  void send(const std::string& line);
  /// Next line, or nullopt on timeout / closed connection.
  std::optional<std::string> read_line(double timeout_seconds);

 private:
  int fd_ = -1;
  std::string buf_;
};

// --- closed-loop replay -----------------------------------------------------

struct ReplayConfig {
  sim::TrackMap map = sim::default_map();
  sim::FailureConfig failure;
  double duration = 180.0;
  double sim_dt = 0.02;
  double rate = 2.0;
  double z_bar = 0.5;
  double handover_radius = 0.3;  // evaluations with the vehicles closer than this are excluded
  std::uint64_t seed = 1;
};

struct ReplayRun {
  FailureMode mode = FailureMode::Nominal;
  std::string offender_id;
  std::string companion_id;
  std::vector<Evaluation> evaluations;  // all manager evaluations
  std::vector<bool> excluded;           // handover exclusions, parallel to evaluations
  std::vector<std::string> event_log;
  sim::TrajectoryLog offender_log;
  sim::TrajectoryLog companion_log;
  std::size_t warnings_to_companion = 0;
};

/// Drives a failing vehicle (mode) and a nominal companion through an
/// in-process manager over the text protocol.
ReplayRun replay_mode(FailureMode mode, const Detector& det, const ReplayConfig& cfg);

struct ReplaySummary {
  std::map<FailureMode, std::pair<std::size_t, std::size_t>> offender;  // correct, total
  std::size_t nominal_evaluations = 0;  // companion and nominal-run evaluations
  std::size_t nominal_false_warnings = 0;
  double overall() const;
  double false_warning_rate() const;
};

ReplaySummary summarize(const std::vector<ReplayRun>& runs, double z_bar);

/// Table II-style report: one row for the detector, offender evaluations
/// per mode column.
eval::EvalReport replay_report(const std::vector<ReplayRun>& runs, const Detector& det, std::size_t parameters,
                               double z_bar);

/// Recomputes every offender/companion verdict offline from the recorded
/// logs (resampled, windowed, scored one window at a time) and counts
/// mismatches against the manager's z_hat bit patterns.
std::size_t offline_mismatches(const ReplayRun& run, const Detector& det, const ReplayConfig& cfg);

}  // namespace failnet::manager
