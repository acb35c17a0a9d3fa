// SPDX-License-Identifier: Apache-2.0
#include "failnet/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace failnet::config {

namespace {

namespace pt = boost::property_tree;

struct Entry {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

[[noreturn]] void bad_value(const std::string& key, const std::string& v, const std::string& why) {
  throw ConfigError("config key '" + key + "': cannot use '" + v + "' (" + why + ")");
}

double to_double(const std::string& key, const std::string& v) {
  auto d = parse_double(v);
  if (!d) bad_value(key, v, "expected a finite number");
  return *d;
}

long long to_int(const std::string& key, const std::string& v) {
  auto i = parse_int(v);
  if (!i) bad_value(key, v, "expected an integer");
  return *i;
}

std::size_t to_count(const std::string& key, const std::string& v) {
  const auto i = to_int(key, v);
  if (i < 0) bad_value(key, v, "expected a non-negative integer");
  return static_cast<std::size_t>(i);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "expected true or false");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::vector<double> to_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& s : split_list(v)) out.push_back(to_double(key, s));
  if (out.empty()) bad_value(key, v, "expected a comma-separated list of numbers");
  return out;
}

template <class T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
  return out;
}

using DoubleRef = std::function<double&(RunConfig&)>;
using CountRef = std::function<std::size_t&(RunConfig&)>;

Entry real(std::string key, DoubleRef ref) {
  return {key, [ref, key](RunConfig& c, const std::string& v) { ref(c) = to_double(key, v); },
          [ref](const RunConfig& c) { return fmt17(ref(const_cast<RunConfig&>(c))); }};
}

Entry count(std::string key, CountRef ref) {
  return {key, [ref, key](RunConfig& c, const std::string& v) { ref(c) = to_count(key, v); },
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

const std::vector<Entry>& schema() {
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> e;
    e.push_back({"run.seed", [](RunConfig& c, const std::string& v) {
                   c.seed = static_cast<std::uint64_t>(to_count("run.seed", v));
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});

    // Failure models.
    e.push_back(real("sim.a_delta", [](RunConfig& c) -> double& { return c.generate.failure.a_delta; }));
    e.push_back(real("sim.t_delta", [](RunConfig& c) -> double& { return c.generate.failure.t_delta; }));
    e.push_back(real("sim.t_v", [](RunConfig& c) -> double& { return c.generate.failure.t_v; }));
    e.push_back(real("sim.a", [](RunConfig& c) -> double& { return c.generate.failure.a; }));
    e.push_back(real("sim.b", [](RunConfig& c) -> double& { return c.generate.failure.b; }));
    e.push_back(real("sim.s_bar", [](RunConfig& c) -> double& { return c.generate.failure.s_bar; }));
    e.push_back(real("sim.v_speeding", [](RunConfig& c) -> double& { return c.generate.failure.v_speeding; }));
    e.push_back(real("sim.reckless_rate", [](RunConfig& c) -> double& { return c.generate.failure.reckless_rate; }));
    e.push_back(real("sim.reckless_burst", [](RunConfig& c) -> double& { return c.generate.failure.reckless_burst; }));
    e.push_back(real("sim.reckless_steer_std",
                     [](RunConfig& c) -> double& { return c.generate.failure.reckless_steer_std; }));
    e.push_back(real("sim.reckless_tau", [](RunConfig& c) -> double& { return c.generate.failure.reckless_tau; }));
    e.push_back(
        real("sim.reckless_speed_lo", [](RunConfig& c) -> double& { return c.generate.failure.reckless_speed_lo; }));
    e.push_back(
        real("sim.reckless_speed_hi", [](RunConfig& c) -> double& { return c.generate.failure.reckless_speed_hi; }));
    e.push_back(real("sim.dt", [](RunConfig& c) -> double& { return c.generate.sim_dt; }));

    // Map geometry.
    e.push_back(real("map.r_mask", [](RunConfig& c) -> double& { return c.generate.map.r_mask; }));
    e.push_back(real("map.r_enter", [](RunConfig& c) -> double& { return c.generate.map.r_enter; }));

    // Dataset.
    e.push_back(real("data.minutes_per_mode", [](RunConfig& c) -> double& { return c.generate.minutes_per_mode; }));
    e.push_back(real("data.nominal_minutes", [](RunConfig& c) -> double& { return c.generate.nominal_minutes; }));
    e.push_back(real("data.log_seconds", [](RunConfig& c) -> double& { return c.generate.log_seconds; }));
    e.push_back(real("data.rate", [](RunConfig& c) -> double& { return c.generate.rate; }));
    e.push_back(count("data.L", [](RunConfig& c) -> std::size_t& { return c.generate.L; }));
    e.push_back(count("data.stride", [](RunConfig& c) -> std::size_t& { return c.generate.stride; }));
    e.push_back({"data.feature_mode",
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.generate.feature_mode = data::parse_feature_mode(v);
                   } catch (const InvalidInput&) {
                     bad_value("data.feature_mode", v, "expected global or egocentric");
                   }
                 },
                 [](const RunConfig& c) { return std::string(data::feature_mode_name(c.generate.feature_mode)); }});
    e.push_back(real("data.split_ratio", [](RunConfig& c) -> double& { return c.train.split_ratio; }));

    // Training.
    e.push_back({"train.roster",
                 [](RunConfig& c, const std::string& v) {
                   std::vector<pipeline::Method> roster;
                   for (const auto& k : split_list(v)) {
                     try {
                       roster.push_back(pipeline::parse_method(k));
                     } catch (const InvalidInput&) {
                       bad_value("train.roster", v, "unknown method '" + k + "'");
                     }
                   }
                   if (roster.empty()) bad_value("train.roster", v, "empty roster");
                   c.train.roster = roster;
                 },
                 [](const RunConfig& c) {
                   return join<pipeline::Method>(c.train.roster, [](const pipeline::Method& m) {
                     return std::string(pipeline::method_key(m));
                   });
                 }});
    e.push_back(real("train.learning_rate", [](RunConfig& c) -> double& { return c.train.rnn.learning_rate; }));
    e.push_back(count("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.train.rnn.batch_size; }));
    e.push_back(count("train.epochs", [](RunConfig& c) -> std::size_t& { return c.train.rnn.epochs; }));
    e.push_back(count("train.patience", [](RunConfig& c) -> std::size_t& { return c.train.rnn.patience; }));
    e.push_back(real("train.mlp_learning_rate", [](RunConfig& c) -> double& { return c.train.mlp.learning_rate; }));
    e.push_back(count("train.mlp_batch_size", [](RunConfig& c) -> std::size_t& { return c.train.mlp.batch_size; }));
    e.push_back(count("train.mlp_epochs", [](RunConfig& c) -> std::size_t& { return c.train.mlp.epochs; }));
    e.push_back(count("train.mlp_patience", [](RunConfig& c) -> std::size_t& { return c.train.mlp.patience; }));
    e.push_back(real("train.t_stamp", [](RunConfig& c) -> double& { return c.train.t_stamp; }));
    e.push_back({"train.grad_check",
                 [](RunConfig& c, const std::string& v) { c.grad_check_before_train = to_bool("train.grad_check", v); },
                 [](const RunConfig& c) { return std::string(c.grad_check_before_train ? "true" : "false"); }});
    e.push_back(real("train.grad_check_eps", [](RunConfig& c) -> double& { return c.grad_check_eps; }));
    e.push_back(count("train.grad_check_seeds", [](RunConfig& c) -> std::size_t& { return c.grad_check_seeds; }));

    // Baselines.
    e.push_back(real("baselines.delta_kappa", [](RunConfig& c) -> double& { return c.train.kalman.delta; }));
    e.push_back(real("baselines.kalman_q", [](RunConfig& c) -> double& { return c.train.kalman.q; }));
    e.push_back(real("baselines.kalman_r", [](RunConfig& c) -> double& { return c.train.kalman.r; }));
    e.push_back({"baselines.kalman_q_grid",
                 [](RunConfig& c, const std::string& v) { c.train.kalman_q = to_doubles("baselines.kalman_q_grid", v); },
                 [](const RunConfig& c) { return join<double>(c.train.kalman_q, [](const double& d) { return fmt17(d); }); }});
    e.push_back({"baselines.kalman_r_grid",
                 [](RunConfig& c, const std::string& v) { c.train.kalman_r = to_doubles("baselines.kalman_r_grid", v); },
                 [](const RunConfig& c) { return join<double>(c.train.kalman_r, [](const double& d) { return fmt17(d); }); }});
    e.push_back({"baselines.kalman_aggregation",
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.train.kalman.aggregation = baselines::parse_statistic(v);
                   } catch (const InvalidInput&) {
                     bad_value("baselines.kalman_aggregation", v, "expected avg or max");
                   }
                 },
                 [](const RunConfig& c) { return std::string(baselines::statistic_name(c.train.kalman.aggregation)); }});
    e.push_back(count("baselines.kalman_warmup", [](RunConfig& c) -> std::size_t& { return c.train.kalman.warmup; }));

    // Manager.
    e.push_back(real("manager.z_bar", [](RunConfig& c) -> double& { return c.manager.z_bar; }));
    e.push_back(real("manager.eval_period", [](RunConfig& c) -> double& { return c.manager.eval_period; }));
    e.push_back(real("manager.session_timeout", [](RunConfig& c) -> double& { return c.manager.session_timeout; }));
    e.push_back(real("manager.heartbeat", [](RunConfig& c) -> double& { return c.manager.heartbeat_seconds; }));
    e.push_back({"manager.host", [](RunConfig& c, const std::string& v) { c.manager.host = v; },
                 [](const RunConfig& c) { return c.manager.host; }});
    e.push_back({"manager.port",
                 [](RunConfig& c, const std::string& v) {
                   const auto p = to_int("manager.port", v);
                   if (p < 0 || p > 65535) bad_value("manager.port", v, "expected 0..65535");
                   c.manager.port = static_cast<int>(p);
                 },
                 [](const RunConfig& c) { return std::to_string(c.manager.port); }});
    e.push_back({"manager.checkpoint", [](RunConfig& c, const std::string& v) { c.manager.checkpoint = v; },
                 [](const RunConfig& c) { return c.manager.checkpoint; }});
    e.push_back({"manager.event_log", [](RunConfig& c, const std::string& v) { c.manager.event_log = v; },
                 [](const RunConfig& c) { return c.manager.event_log; }});

    // Replay.
    e.push_back(real("replay.duration", [](RunConfig& c) -> double& { return c.replay.duration; }));
    e.push_back(real("replay.handover_radius", [](RunConfig& c) -> double& { return c.replay.handover_radius; }));
    e.push_back({"replay.detector",
                 [](RunConfig& c, const std::string& v) {
                   if (v != "best") {
                     try {
                       if (!pipeline::is_recurrent(pipeline::parse_method(v)) &&
                           !pipeline::is_learned(pipeline::parse_method(v)))
                         bad_value("replay.detector", v, "threshold rules cannot drive the manager");
                     } catch (const ConfigError&) {
                       throw;
                     } catch (const InvalidInput&) {
                       bad_value("replay.detector", v, "expected best or a learned method key");
                     }
                   }
                   c.replay_detector = v;
                 },
                 [](const RunConfig& c) { return c.replay_detector; }});
    return e;
  }();
  return entries;
}

const Entry& find_entry(const std::string& key) {
  static const std::map<std::string, const Entry*> index = [] {
    std::map<std::string, const Entry*> m;
    for (const auto& e : schema()) m[e.key] = &e;
    return m;
  }();
  auto it = index.find(key);
  if (it == index.end()) throw ConfigError("unknown config key '" + key + "'");
  return *it->second;
}

}  // namespace

void RunConfig::finalize() {
  generate.seed = seed;
  train.rnn.seed = derive_seed(seed, 101);
  train.mlp.seed = derive_seed(seed, 102);
  replay.seed = derive_seed(seed, 103);

  manager.L = generate.L;
  manager.rate = generate.rate;
  manager.map = generate.map;
  replay.map = generate.map;
  replay.failure = generate.failure;
  replay.rate = generate.rate;
  replay.sim_dt = generate.sim_dt;
  replay.z_bar = manager.z_bar;

  generate.validate();
  train.rnn.validate();
  train.mlp.validate();
  train.kalman.validate();
  manager.validate();
  if (!(train.split_ratio > 0.0 && train.split_ratio < 1.0)) throw ConfigError("data.split_ratio must lie in (0, 1)");
  if (!(train.t_stamp >= 0.0)) throw ConfigError("train.t_stamp must be non-negative");
  if (!(grad_check_eps > 1e-7 && grad_check_eps < 1e-3)) throw ConfigError("train.grad_check_eps must lie in (1e-7, 1e-3)");
  if (!(replay.duration > 0.0)) throw ConfigError("replay.duration must be positive");
}

std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& e : schema()) out.push_back(e.key);
  return out;
}

RunConfig parse_config(std::istream& ini, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  pt::ptree tree;
  try {
    pt::read_ini(ini, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key '" + section + "' must live in a section");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      find_entry(full).set(cfg, value.get_value<std::string>());
    }
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' must look like section.key=value");
    find_entry(o.substr(0, eq)).set(cfg, o.substr(eq + 1));
  }
  cfg.finalize();
  return cfg;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  if (path.empty()) {
    std::istringstream empty;
    return parse_config(empty, overrides);
  }
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  return parse_config(is, overrides);
}

void write_config(std::ostream& os, const RunConfig& cfg) {
  std::string section;
  for (const auto& e : schema()) {
    const auto dot = e.key.find('.');
    const std::string s = e.key.substr(0, dot);
    if (s != section) {
      os << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    os << e.key.substr(dot + 1) << " = " << e.get(cfg) << '\n';
  }
}

}  // namespace failnet::config
