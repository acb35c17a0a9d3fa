// SPDX-License-Identifier: Apache-2.0
#include "failnet/workflow.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace failnet::workflow {

namespace fs = std::filesystem;
using pipeline::Method;

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

std::string join(const std::string& a, const std::string& b) { return (fs::path(a) / b).string(); }

void require_dir(const std::string& path, const std::string& what, const std::string& hint) {
  if (!fs::is_directory(path)) throw MissingInput(what + " not found at " + path + " (" + hint + ")");
}

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingInput("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

std::string RunDir::config() const { return join(root, "config.ini"); }
std::string RunDir::logs() const { return join(root, "logs"); }
std::string RunDir::dataset() const { return join(root, "dataset"); }
std::string RunDir::models() const { return join(root, "models"); }
std::string RunDir::reports() const { return join(root, "reports"); }
std::string RunDir::replay() const { return join(root, "replay"); }

// ---------------------------------------------------------------------------

GenerateSummary run_generate(const config::RunConfig& cfg, const RunDir& dir, bool force, const Logger& log) {
  if (fs::exists(dir.dataset()) || fs::exists(dir.logs())) {
    if (!force) throw OutputExists(dir.root + " already holds generated data (use --force to overwrite)");
    fs::remove_all(dir.dataset());
    fs::remove_all(dir.logs());
  }
  fs::create_directories(dir.root);
  const auto g = pipeline::generate(cfg.generate, log);
  pipeline::save_generated(g, dir.root);
  {
    std::ofstream os(dir.config());
    if (!os) throw FormatError("cannot write " + dir.config());
    config::write_config(os, cfg);
  }
  GenerateSummary s;
  s.logs = g.logs.size();
  s.windows = g.windows.size();
  for (const auto& w : g.windows) ++s.counts[w.mode];
  say(log, "wrote " + std::to_string(s.windows) + " windows from " + std::to_string(s.logs) + " logs to " +
               dir.dataset());
  return s;
}

std::uint64_t split_seed(std::uint64_t run_seed) { return derive_seed(run_seed, 100); }

data::DatasetSplit load_split(const config::RunConfig& cfg, const RunDir& dir, data::DatasetMeta* meta) {
  require_dir(dir.dataset(), "dataset", "run `generate` first");
  data::DatasetMeta m;
  const auto windows = data::load_dataset(dir.dataset(), &m);
  if (windows.empty()) throw MissingInput("dataset at " + dir.dataset() + " is empty");
  if (meta) *meta = m;
  return data::split_dataset(windows, cfg.train.split_ratio, split_seed(cfg.seed));
}

// ---------------------------------------------------------------------------

GradCheckSummary run_grad_check(const config::RunConfig& cfg) {
  GradCheckSummary s;
  const auto t0 = std::chrono::steady_clock::now();
  s.results = pipeline::run_grad_checks(cfg.grad_check_seeds, cfg.grad_check_eps, cfg.seed, cfg.generate.L);
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& r : s.results) s.worst = std::max(s.worst, r.max_rel_error);
  s.pass = !s.results.empty() && s.worst < 1e-4;
  return s;
}

std::string format_grad_check(const GradCheckSummary& s) {
  std::map<std::string, std::pair<double, std::size_t>> by_model;
  std::map<std::string, std::size_t> params;
  for (const auto& r : s.results) {
    auto& [worst, fails] = by_model[r.model];
    worst = std::max(worst, r.max_rel_error);
    fails += r.max_rel_error >= 1e-4 ? 1 : 0;
    params[r.model] = r.parameters;
  }
  std::ostringstream os;
  for (const auto& [model, wf] : by_model) {
    char line[160];
    std::snprintf(line, sizeof line, "%-6s params %6zu  worst %.3e  seeds >= 1e-4: %zu\n", model.c_str(),
                  params[model], wf.first, wf.second);
    os << line;
  }
  char tail[96];
  std::snprintf(tail, sizeof tail, "worst %.3e in %.1f s: %s\n", s.worst, s.seconds, s.pass ? "PASS" : "FAIL");
  os << tail;
  return os.str();
}

// ---------------------------------------------------------------------------

void run_train(const config::RunConfig& cfg, const RunDir& dir, const Logger& log) {
  data::DatasetMeta meta;
  const auto split = load_split(cfg, dir, &meta);
  for (const auto& w : split.warnings) say(log, "split: " + w);
  say(log, "train " + std::to_string(split.train.size()) + " / validation " + std::to_string(split.validation.size()) +
               " windows");
  pipeline::TrainSettings ts = cfg.train;
  auto models = pipeline::train_all(split, meta.L, meta.feature_mode, ts, log);
  pipeline::save_models(models, dir.models());
  say(log, "wrote models to " + dir.models());
}

// ---------------------------------------------------------------------------

bool EvaluateResult::pass() const {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return true;
}

EvaluateResult run_evaluate(const config::RunConfig& cfg, const RunDir& dir, const Logger& log) {
  require_dir(dir.models(), "models", "run `train` first");
  const auto split = load_split(cfg, dir);
  auto models = pipeline::load_models(dir.models());
  std::vector<Method> roster;
  for (Method m : cfg.train.roster)
    if (models.has(m)) roster.push_back(m);
    else say(log, "skipping " + std::string(pipeline::method_name(m)) + ": not trained");
  if (roster.empty()) throw MissingInput("no trained methods in " + dir.models());

  EvaluateResult r;
  r.report = pipeline::evaluate_all(models, split.validation, roster);
  r.report.title = "Accuracy on validation data";
  r.report.metadata["seed"] = std::to_string(cfg.seed);
  r.report.metadata["windows"] = std::to_string(split.validation.size());
  eval::emit_report(r.report, dir.reports(), "table1");
  r.checks = pipeline::accuracy_checks(r.report);
  for (auto& c : pipeline::ordering_checks(r.report)) r.checks.push_back(std::move(c));
  say(log, "wrote " + join(dir.reports(), "table1.txt"));
  return r;
}

// ---------------------------------------------------------------------------

Method resolve_detector(const config::RunConfig& cfg, const RunDir& dir, const Logger& log) {
  if (cfg.replay_detector != "best") {
    const Method m = pipeline::parse_method(cfg.replay_detector);
    if (!pipeline::is_learned(m))
      throw InvalidInput("replay.detector must be a learned method, got '" + cfg.replay_detector + "'");
    return m;
  }
  const auto csv = join(dir.reports(), "table1.csv");
  eval::EvalReport report;
  if (fs::exists(csv)) {
    report = eval::parse_csv(read_file(csv));
  } else {
    say(log, "no evaluation report; evaluating to pick the best recurrent model");
    report = run_evaluate(cfg, dir, log).report;
  }
  const auto best = pipeline::best_rnn(report);
  if (!best) throw MissingInput("no recurrent model in " + csv);
  return *best;
}

std::string serve_checkpoint(const config::RunConfig& cfg, const RunDir& dir, const Logger& log) {
  if (!cfg.manager.checkpoint.empty()) return cfg.manager.checkpoint;
  const Method m = resolve_detector(cfg, dir, log);
  const auto path = join(dir.models(), std::string(pipeline::method_key(m)) + ".ckpt");
  if (!fs::exists(path)) throw MissingInput("checkpoint not found at " + path + " (run `train` first)");
  return path;
}

bool ReplayResult::pass() const {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return true;
}

ReplayResult run_replay(const config::RunConfig& cfg, const RunDir& dir, const Logger& log) {
  ReplayResult r;
  r.method = resolve_detector(cfg, dir, log);
  const auto ckpt = join(dir.models(), std::string(pipeline::method_key(r.method)) + ".ckpt");
  if (!fs::exists(ckpt)) throw MissingInput("checkpoint not found at " + ckpt + " (run `train` first)");
  const auto det = manager::load_detector(ckpt);
  if (det.L != cfg.manager.L)
    throw InvalidInput("checkpoint window length " + std::to_string(det.L) + " differs from data.L " +
                       std::to_string(cfg.manager.L));
  auto models = pipeline::load_models(dir.models());
  const std::size_t params = pipeline::method_parameters(r.method, models);

  fs::create_directories(dir.replay());
  std::vector<manager::ReplayRun> runs;
  for (FailureMode m : kAllModes) {
    say(log, "replay " + std::string(mode_name(m)) + " with " + det.name);
    runs.push_back(manager::replay_mode(m, det, cfg.replay));
    r.mismatches += manager::offline_mismatches(runs.back(), det, cfg.replay);
    std::ofstream os(join(dir.replay(), "events_" + std::string(mode_name(m)) + ".log"));
    if (!os) throw FormatError("cannot write event log in " + dir.replay());
    for (const auto& line : runs.back().event_log) os << line << '\n';
  }
  r.summary = manager::summarize(runs, cfg.replay.z_bar);
  r.report = manager::replay_report(runs, det, params, cfg.replay.z_bar);
  eval::emit_report(r.report, dir.replay(), "table2");

  r.checks.push_back({"online overall accuracy >= 0.75", r.summary.overall() >= 0.75, fmt9(r.summary.overall())});
  r.checks.push_back({"nominal false-warning rate <= 0.20", r.summary.false_warning_rate() <= 0.20,
                      fmt9(r.summary.false_warning_rate()) + " (" + std::to_string(r.summary.nominal_false_warnings) +
                          "/" + std::to_string(r.summary.nominal_evaluations) + ")"});
  r.checks.push_back({"offline and online verdicts identical", r.mismatches == 0,
                      std::to_string(r.mismatches) + " mismatches"});
  return r;
}

std::string format_checks(const std::vector<Check>& checks) {
  std::ostringstream os;
  for (const auto& c : checks) os << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
  return os.str();
}

}  // namespace failnet::workflow
