// SPDX-License-Identifier: Apache-2.0
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "failnet/workflow.hpp"

namespace py = pybind11;
using namespace failnet;

namespace {

py::dict method_dict(const eval::MethodResult& r) {
  py::dict modes;
  for (const auto& [m, c] : r.modes) modes[py::str(std::string(mode_name(m)))] = py::make_tuple(c.correct, c.total);
  py::dict d;
  d["parameters"] = r.parameters;
  d["overall"] = r.overall();
  d["modes"] = modes;
  return d;
}

py::dict report_dict(const eval::EvalReport& rep) {
  py::dict methods;
  for (const auto& r : rep.methods) methods[py::str(r.name)] = method_dict(r);
  py::dict d;
  d["title"] = rep.title;
  d["metadata"] = rep.metadata;
  d["methods"] = methods;
  d["table"] = eval::format_table(rep);
  return d;
}

py::list checks_list(const std::vector<pipeline::Check>& cs) {
  py::list out;
  for (const auto& c : cs) out.append(py::make_tuple(c.name, c.pass, c.detail));
  return out;
}

data::PoseWindow to_window(const std::vector<std::array<double, 4>>& poses, const std::string& source) {
  data::PoseWindow w;
  w.source = source;
  for (const auto& p : poses) w.poses.push_back({p[0], p[1], p[2], p[3]});
  return w;
}

py::dict message_dict(const manager::Message& m) {
  py::dict d;
  std::visit(
      [&](const auto& msg) {
        using T = std::decay_t<decltype(msg)>;
        if constexpr (std::is_same_v<T, manager::PoseMsg>) {
          d["type"] = "POSE";
          d["vehicle_id"] = msg.vehicle_id;
          d["t"] = msg.t;
          d["x"] = msg.x;
          d["y"] = msg.y;
          d["theta"] = msg.theta;
        } else if constexpr (std::is_same_v<T, manager::WarnMsg>) {
          d["type"] = "WARN";
          d["target_id"] = msg.target_id;
          d["offending_id"] = msg.offending_id;
          d["z_hat"] = msg.z_hat;
          d["t"] = msg.t;
        } else if constexpr (std::is_same_v<T, manager::StatusMsg>) {
          d["type"] = "STATUS";
          d["vehicle_id"] = msg.vehicle_id;
          d["zone"] = std::string(manager::zone_name(msg.zone));
          d["buffer_len"] = msg.buffer_len;
        } else if constexpr (std::is_same_v<T, manager::QueryMsg>) {
          d["type"] = "QUERY";
          d["vehicle_id"] = msg.vehicle_id;
        } else {
          d["type"] = "ERR";
          d["code"] = msg.code;
          d["text"] = msg.text;
        }
      },
      m);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Failure detection from external pose observations: simulation, training, evaluation and the "
            "intersection manager.";

  py::register_exception<manager::ProtocolError>(m, "ProtocolError", PyExc_ValueError);

  py::class_<config::RunConfig>(m, "RunConfig")
      .def_readwrite("seed", &config::RunConfig::seed)
      .def_property_readonly("window_length", [](const config::RunConfig& c) { return c.generate.L; })
      .def("to_ini",
           [](const config::RunConfig& c) {
             std::ostringstream os;
             config::write_config(os, c);
             return os.str();
           })
      .def("__repr__", [](const config::RunConfig& c) { return "<RunConfig seed=" + std::to_string(c.seed) + ">"; });

  m.def("known_keys", &config::known_keys, "Every accepted section.key.");
  m.def("load_config", &config::load_config, py::arg("path") = "", py::arg("overrides") = std::vector<std::string>{},
        "Read an INI file (empty path: defaults) and apply section.key=value overrides.");
  m.def(
      "parse_config",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        std::istringstream is(text);
        return config::parse_config(is, overrides);
      },
      py::arg("text"), py::arg("overrides") = std::vector<std::string>{});

  m.def(
      "generate",
      [](const config::RunConfig& cfg, const std::string& out, bool force) {
        py::gil_scoped_release release;
        const auto s = workflow::run_generate(cfg, {out}, force);
        py::gil_scoped_acquire acquire;
        py::dict counts;
        for (const auto& [mode, n] : s.counts) counts[py::str(std::string(mode_name(mode)))] = n;
        py::dict d;
        d["logs"] = s.logs;
        d["windows"] = s.windows;
        d["counts"] = counts;
        return d;
      },
      py::arg("config"), py::arg("out"), py::arg("force") = false, "Simulate drives and write the dataset.");

  m.def(
      "train",
      [](const config::RunConfig& cfg, const std::string& out) {
        py::gil_scoped_release release;
        workflow::run_train(cfg, {out});
      },
      py::arg("config"), py::arg("out"), "Train the roster on a generated dataset.");

  m.def(
      "evaluate",
      [](const config::RunConfig& cfg, const std::string& out) {
        workflow::EvaluateResult r;
        {
          py::gil_scoped_release release;
          r = workflow::run_evaluate(cfg, {out});
        }
        py::dict d = report_dict(r.report);
        d["checks"] = checks_list(r.checks);
        d["passed"] = r.pass();
        return d;
      },
      py::arg("config"), py::arg("out"), "Score trained methods on the validation split.");

  m.def(
      "replay",
      [](const config::RunConfig& cfg, const std::string& out) {
        workflow::ReplayResult r;
        {
          py::gil_scoped_release release;
          r = workflow::run_replay(cfg, {out});
        }
        py::dict d = report_dict(r.report);
        d["detector"] = std::string(pipeline::method_name(r.method));
        d["overall"] = r.summary.overall();
        d["false_warning_rate"] = r.summary.false_warning_rate();
        d["mismatches"] = r.mismatches;
        d["checks"] = checks_list(r.checks);
        d["passed"] = r.pass();
        return d;
      },
      py::arg("config"), py::arg("out"), "Closed-loop replay of every mode against the manager.");

  m.def(
      "grad_check",
      [](const config::RunConfig& cfg) {
        workflow::GradCheckSummary s;
        {
          py::gil_scoped_release release;
          s = workflow::run_grad_check(cfg);
        }
        py::list rows;
        for (const auto& r : s.results) {
          py::dict row;
          row["model"] = r.model;
          row["seed"] = r.seed;
          row["parameters"] = r.parameters;
          row["max_rel_error"] = r.max_rel_error;
          rows.append(row);
        }
        py::dict d;
        d["results"] = rows;
        d["worst"] = s.worst;
        d["seconds"] = s.seconds;
        d["passed"] = s.pass;
        return d;
      },
      py::arg("config"), "Finite-difference gradient check of every learned architecture.");

  m.def("bce_loss", py::overload_cast<double, int>(&nn::bce_loss), py::arg("z_hat"), py::arg("z"));
  m.def(
      "fft_yaw_power",
      [](const std::vector<std::array<double, 4>>& poses) { return baselines::fft_yaw_power(to_window(poses, "")); },
      py::arg("poses"), "Yaw spectral power for modes 2..L/2 of a window of (t, x, y, theta) poses.");

  // --- manager ---------------------------------------------------------------

  py::class_<manager::Detector>(m, "Detector")
      .def_readonly("name", &manager::Detector::name)
      .def_readonly("window_length", &manager::Detector::L)
      .def(
          "score",
          [](const manager::Detector& d, const std::vector<std::array<double, 4>>& poses) {
            return d.score(to_window(poses, ""));
          },
          py::arg("poses"), "Failure probability for one window of (t, x, y, theta) poses.");
  m.def("load_detector", &manager::load_detector, py::arg("checkpoint"));

  m.def(
      "parse_message", [](const std::string& line) { return message_dict(manager::parse_message(line)); },
      py::arg("line"), "Parse one protocol line; raises ProtocolError.");
  m.def(
      "format_pose",
      [](const std::string& id, double t, double x, double y, double theta) {
        return manager::format_message(manager::PoseMsg{id, t, x, y, theta});
      },
      py::arg("vehicle_id"), py::arg("t"), py::arg("x"), py::arg("y"), py::arg("theta"));
  m.def(
      "classify_zone",
      [](double x, double y) { return std::string(manager::zone_name(manager::classify_zone(sim::default_map(), x, y))); },
      py::arg("x"), py::arg("y"), "Zone of a point on the default map: outside, approaching or masked.");

  py::class_<manager::IntersectionManager>(m, "IntersectionManager")
      .def(py::init([](const manager::Detector& det, double z_bar) {
             manager::ManagerConfig cfg;
             cfg.L = det.L;
             cfg.z_bar = z_bar;
             return manager::IntersectionManager(cfg, det);
           }),
           py::arg("detector"), py::arg("z_bar") = 0.5)
      .def(
          "handle_line",
          [](manager::IntersectionManager& mgr, const std::string& line) {
            const auto out = mgr.handle_line(line);
            std::vector<std::string> replies, warnings;
            for (const auto& r : out.replies) replies.push_back(manager::format_message(r));
            for (const auto& w : out.warnings) warnings.push_back(manager::format_message(w));
            return py::make_tuple(replies, warnings);
          },
          py::arg("line"), "Returns (replies to the sender, warnings for other vehicles).")
      .def(
          "advance",
          [](manager::IntersectionManager& mgr, double now) {
            std::vector<std::string> out;
            for (const auto& w : mgr.advance(now)) out.push_back(manager::format_message(w));
            return out;
          },
          py::arg("now"))
      .def_property_readonly("evaluation_count",
                             [](const manager::IntersectionManager& mgr) { return mgr.evaluations().size(); })
      .def_property_readonly("parse_errors", &manager::IntersectionManager::parse_errors)
      .def("take_log_lines", &manager::IntersectionManager::take_log_lines);
}
