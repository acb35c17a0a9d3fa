// SPDX-License-Identifier: Apache-2.0
#include "failnet/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace failnet::pipeline {

namespace fs = std::filesystem;

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

std::string source_id(FailureMode m, std::size_t k) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s-%03zu", std::string(mode_name(m)).c_str(), k);
  return buf;
}

void write_curves(const std::string& path, const nn::TrainHistory& h) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path);
  os << "epoch,train_loss,val_loss,val_accuracy\n";
  for (std::size_t e = 0; e < h.train_loss.size(); ++e) {
    os << e << ',' << fmt17(h.train_loss[e]);
    os << ',' << (e < h.val_loss.size() ? fmt17(h.val_loss[e]) : "");
    os << ',' << (e < h.val_accuracy.size() ? fmt17(h.val_accuracy[e]) : "") << '\n';
  }
}

}  // namespace

// ---------------------------------------------------------------------------

void GenerateConfig::validate() const {
  failure.validate();
  map.validate();
  if (!(minutes_per_mode > 0) || !(nominal_minutes > 0) || !(log_seconds > 0))
    throw InvalidInput("generate: durations must be positive");
  if (!(sim_dt > 0) || !(rate > 0) || sim_dt * rate > 1.0) throw InvalidInput("generate: bad sampling rates");
  if (L < 4 || stride == 0) throw InvalidInput("generate: L must be >= 4 and stride >= 1");
}

std::vector<data::PoseWindow> windows_from_log(const sim::TrajectoryLog& log, const GenerateConfig& cfg) {
  const auto series = data::resample_poses(log, cfg.rate);
  return data::make_windows(series, cfg.L, cfg.stride, &cfg.map, log.mode, log.vehicle_id);
}

Generated generate(const GenerateConfig& cfg, const Logger& log) {
  cfg.validate();
  Generated g;
  g.meta.rate = cfg.rate;
  g.meta.L = cfg.L;
  g.meta.stride = cfg.stride;
  g.meta.feature_mode = cfg.feature_mode;
  g.meta.seed = cfg.seed;
  const std::size_t routes = cfg.map.routes.size();

  for (FailureMode mode : kAllModes) {
    const double minutes = mode == FailureMode::Nominal ? cfg.nominal_minutes : cfg.minutes_per_mode;
    const auto n_logs = static_cast<std::size_t>(std::ceil(minutes * 60.0 / cfg.log_seconds - 1e-9));
    const auto mode_index = static_cast<std::size_t>(mode);
    std::size_t windows_before = g.windows.size();
    for (std::size_t k = 0; k < n_logs; ++k) {
      sim::FailureConfig fc = cfg.failure;
      fc.mode = mode;
      const std::uint64_t seed = derive_seed(cfg.seed, 1000 * (mode_index + 1) + k);
      sim::ScenarioOptions opt;
      opt.route = (k + 5 * mode_index) % routes;
      opt.vehicle_id = source_id(mode, k);
      opt.dt = cfg.sim_dt;
      const double duration = std::min(cfg.log_seconds, minutes * 60.0 - cfg.log_seconds * static_cast<double>(k));
      sim::TrajectoryLog tl = sim::run_scenario(cfg.map, fc, duration, seed, opt);
      auto ws = windows_from_log(tl, cfg);
      g.windows.insert(g.windows.end(), ws.begin(), ws.end());
      g.logs.push_back(std::move(tl));
    }
    say(log, std::string(mode_name(mode)) + ": " + std::to_string(n_logs) + " logs, " +
                 std::to_string(g.windows.size() - windows_before) + " windows");
  }
  return g;
}

void save_generated(const Generated& g, const std::string& dir) {
  const fs::path logs = fs::path(dir) / "logs";
  fs::create_directories(logs);
  for (const auto& l : g.logs) {
    const auto path = (logs / (l.vehicle_id + ".csv")).string();
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path);
    sim::write_log(os, l);
  }
  data::save_dataset((fs::path(dir) / "dataset").string(), g.windows, g.meta);
}

// ---------------------------------------------------------------------------

std::string_view method_name(Method m) {
  switch (m) {
    case Method::SpeedThreshold: return "Speed threshold";
    case Method::FftThreshold: return "FFT threshold";
    case Method::Kalman: return "Kalman filter";
    case Method::Mlp: return "MLP";
    case Method::SpeedMlp: return "Speed+MLP";
    case Method::FftMlp: return "FFT+MLP";
    case Method::Lstm: return "FailureNet-LSTM";
    case Method::Gru: return "FailureNet-GRU";
    case Method::Cfc: return "FailureNet-CfC";
  }
  return "?";
}

std::string_view method_key(Method m) {
  switch (m) {
    case Method::SpeedThreshold: return "speed";
    case Method::FftThreshold: return "fft";
    case Method::Kalman: return "kalman";
    case Method::Mlp: return "mlp";
    case Method::SpeedMlp: return "speed_mlp";
    case Method::FftMlp: return "fft_mlp";
    case Method::Lstm: return "lstm";
    case Method::Gru: return "gru";
    case Method::Cfc: return "cfc";
  }
  return "?";
}

Method parse_method(std::string_view key) {
  for (Method m : kAllMethods)
    if (method_key(m) == key) return m;
  throw InvalidInput("unknown method '" + std::string(key) + "'");
}

bool is_recurrent(Method m) { return m == Method::Lstm || m == Method::Gru || m == Method::Cfc; }
bool is_learned(Method m) {
  return is_recurrent(m) || m == Method::Mlp || m == Method::SpeedMlp || m == Method::FftMlp;
}

namespace {

rnn::CellKind cell_of(Method m) {
  switch (m) {
    case Method::Lstm: return rnn::CellKind::LSTM;
    case Method::Gru: return rnn::CellKind::GRU;
    default: return rnn::CellKind::CfC;
  }
}

baselines::PreFilter prefilter_of(Method m) {
  switch (m) {
    case Method::SpeedMlp: return baselines::PreFilter::Speed;
    case Method::FftMlp: return baselines::PreFilter::Fft;
    default: return baselines::PreFilter::None;
  }
}

}  // namespace

TrainSettings::TrainSettings() {
  rnn.learning_rate = 3e-3;
  rnn.batch_size = 16;
  rnn.epochs = 80;
  rnn.patience = 20;
  rnn.final_lr_fraction = 0.05;
  mlp = rnn;
}

bool TrainedModels::has(Method m) const {
  switch (m) {
    case Method::SpeedThreshold: return rules.speed.has_value();
    case Method::FftThreshold: return rules.fft.has_value();
    case Method::Kalman: return rules.kalman.has_value();
    default: return is_recurrent(m) ? rnns.count(m) > 0 : mlps.count(m) > 0;
  }
}

TrainedModels train_all(const data::DatasetSplit& split, std::size_t L, data::FeatureMode mode,
                        const TrainSettings& settings, const Logger& log) {
  if (split.train.empty() || split.validation.empty())
    throw InvalidInput("train: both the training and validation splits must be non-empty");
  TrainedModels out;
  out.L = L;
  out.feature_mode = mode;
  std::vector<int> val_labels;
  for (const auto& w : split.validation) val_labels.push_back(w.label);

  for (Method m : settings.roster) {
    const std::string key(method_key(m));
    std::uint64_t seed_offset = static_cast<std::uint64_t>(m) + 1;
    switch (m) {
      case Method::SpeedThreshold:
      case Method::FftThreshold: {
        std::vector<std::vector<double>> values;
        for (const auto& w : split.validation)
          values.push_back(m == Method::SpeedThreshold ? baselines::window_speeds(w) : baselines::fft_yaw_power(w));
        const auto feature =
            m == Method::SpeedThreshold ? baselines::RuleFeature::Speed : baselines::RuleFeature::FftPower;
        auto rule = baselines::fit_threshold(values, val_labels, feature);
        (m == Method::SpeedThreshold ? out.rules.speed : out.rules.fft) = rule;
        say(log, key + ": " + std::string(baselines::statistic_name(rule.statistic)) + " >= " +
                     fmt9(rule.threshold) + " (fit accuracy " + fmt9(rule.fit_accuracy) + ")");
        break;
      }
      case Method::Kalman: {
        double acc = 0;
        out.rules.kalman =
            baselines::fit_kalman(split.validation, settings.kalman_q, settings.kalman_r, settings.kalman, &acc);
        out.rules.kalman_fit_accuracy = acc;
        say(log, key + ": q=" + fmt9(out.rules.kalman->q) + " r=" + fmt9(out.rules.kalman->r) + " delta=" +
                     fmt9(out.rules.kalman->delta) + " (fit accuracy " + fmt9(acc) + ")");
        break;
      }
      case Method::Mlp:
      case Method::SpeedMlp:
      case Method::FftMlp: {
        baselines::MlpDetector det(prefilter_of(m), L, mode);
        Rng rng(derive_seed(settings.mlp.seed, seed_offset));
        det.model.net.init(rng);
        auto h = baselines::train_mlp_detector(det, split, settings.mlp);
        say(log, key + ": " + std::to_string(h.train_loss.size()) + " epochs, best val accuracy " +
                     fmt9(h.val_accuracy.at(h.best_epoch)));
        out.histories[m] = std::move(h);
        out.mlps.emplace(m, std::move(det));
        break;
      }
      case Method::Lstm:
      case Method::Gru:
      case Method::Cfc: {
        rnn::FailureNetConfig cfg = rnn::default_config(cell_of(m));
        cfg.L = L;
        cfg.feature_mode = mode;
        cfg.t_stamp = settings.t_stamp;
        cfg.threshold = settings.threshold;
        rnn::FailureNetModel model(cfg);
        Rng rng(derive_seed(settings.rnn.seed, seed_offset));
        model.init(rng);
        auto h = rnn::train_failurenet(model, split, settings.rnn);
        say(log, key + ": " + std::to_string(h.train_loss.size()) + " epochs, best val accuracy " +
                     fmt9(h.val_accuracy.at(h.best_epoch)));
        out.histories[m] = std::move(h);
        out.rnns.emplace(m, std::move(model));
        break;
      }
    }
  }
  return out;
}

void save_models(TrainedModels& models, const std::string& dir) {
  fs::create_directories(dir);
  for (auto& [m, model] : models.rnns) rnn::save_failurenet((fs::path(dir) / (std::string(method_key(m)) + ".ckpt")).string(), model);
  for (auto& [m, det] : models.mlps) {
    const auto path = (fs::path(dir) / (std::string(method_key(m)) + ".ckpt")).string();
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path);
    nn::write_checkpoint(os, baselines::to_checkpoint(det));
  }
  {
    const auto path = (fs::path(dir) / "rules.txt").string();
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path);
    baselines::write_rules(os, models.rules);
  }
  for (const auto& [m, h] : models.histories)
    write_curves((fs::path(dir) / ("curves_" + std::string(method_key(m)) + ".csv")).string(), h);
}

TrainedModels load_models(const std::string& dir) {
  if (!fs::is_directory(dir)) throw FormatError("model directory not found: " + dir);
  TrainedModels out;
  bool have_shape = false;
  auto note_shape = [&](std::size_t L, data::FeatureMode mode, const std::string& what) {
    if (have_shape && (L != out.L || mode != out.feature_mode))
      throw FormatError(what + ": window length or feature mode differs from the other checkpoints");
    out.L = L;
    out.feature_mode = mode;
    have_shape = true;
  };
  for (Method m : kAllMethods) {
    if (!is_learned(m)) continue;
    const auto path = fs::path(dir) / (std::string(method_key(m)) + ".ckpt");
    if (!fs::exists(path)) continue;
    if (is_recurrent(m)) {
      auto model = rnn::load_failurenet(path.string());
      note_shape(model.config.L, model.config.feature_mode, path.string());
      out.rnns.emplace(m, std::move(model));
    } else {
      std::ifstream is(path);
      auto det = baselines::mlp_from_checkpoint(nn::read_checkpoint(is));
      note_shape(det.L, det.feature_mode, path.string());
      out.mlps.emplace(m, std::move(det));
    }
  }
  const auto rules = fs::path(dir) / "rules.txt";
  if (fs::exists(rules)) {
    std::ifstream is(rules);
    out.rules = baselines::read_rules(is);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<double> predict(Method m, const TrainedModels& models, const std::vector<data::PoseWindow>& windows) {
  if (!models.has(m)) throw InvalidInput("no trained model for " + std::string(method_key(m)));
  std::vector<double> out;
  out.reserve(windows.size());
  for (const auto& w : windows) {
    if (is_learned(m) && w.poses.size() != models.L)
      throw InvalidInput("window length " + std::to_string(w.poses.size()) + " does not match checkpoint L = " +
                         std::to_string(models.L));
    switch (m) {
      case Method::SpeedThreshold: out.push_back(baselines::speed_threshold_detect(w, *models.rules.speed)); break;
      case Method::FftThreshold: out.push_back(baselines::fft_threshold_detect(w, *models.rules.fft)); break;
      case Method::Kalman: out.push_back(baselines::kalman_detect(w, *models.rules.kalman)); break;
      case Method::Mlp:
      case Method::SpeedMlp:
      case Method::FftMlp: out.push_back(models.mlps.at(m).predict(w)); break;
      case Method::Lstm:
      case Method::Gru:
      case Method::Cfc: {
        const auto& model = models.rnns.at(m);
        out.push_back(rnn::failurenet_forward(model, data::featurize(w, model.config.feature_mode)));
        break;
      }
    }
  }
  return out;
}

std::size_t method_parameters(Method m, TrainedModels& models) {
  if (is_recurrent(m)) return models.rnns.at(m).parameter_count();
  if (is_learned(m)) return models.mlps.at(m).parameter_count();
  return 0;
}

eval::EvalReport evaluate_all(TrainedModels& models, const std::vector<data::PoseWindow>& windows,
                              const std::vector<Method>& roster) {
  if (windows.empty()) throw InvalidInput("evaluate: no windows");
  eval::EvalReport report;
  report.title = "Validation accuracy (%)";
  report.metadata["windows"] = std::to_string(windows.size());
  report.metadata["L"] = std::to_string(models.L);
  report.metadata["feature_mode"] = std::string(data::feature_mode_name(models.feature_mode));
  std::vector<FailureMode> modes;
  for (const auto& w : windows) modes.push_back(w.mode);
  for (Method m : roster) {
    if (!models.has(m)) continue;
    report.methods.push_back(
        eval::score_method(std::string(method_name(m)), method_parameters(m, models), predict(m, models, windows), modes));
  }
  return report;
}

std::vector<Check> ordering_checks(const eval::EvalReport& report) {
  std::vector<Check> out;
  auto acc = [&](Method m) -> std::optional<double> {
    const auto* r = report.find(std::string(method_name(m)));
    return r ? std::optional<double>(r->overall()) : std::nullopt;
  };
  std::optional<double> best_rnn;
  std::string best_name;
  for (Method m : {Method::Lstm, Method::Gru, Method::Cfc})
    if (auto a = acc(m); a && (!best_rnn || *a > *best_rnn)) {
      best_rnn = a;
      best_name = std::string(method_name(m));
    }
  auto compare = [&](const std::string& name, std::optional<double> hi, const std::string& hi_name,
                     std::optional<double> lo, const std::string& lo_name) {
    Check c;
    c.name = name;
    if (!hi || !lo) {
      c.pass = false;
      c.detail = "missing method in report";
    } else {
      c.pass = *hi >= *lo;
      c.detail = hi_name + " " + fmt9(*hi) + (c.pass ? " >= " : " < ") + lo_name + " " + fmt9(*lo);
    }
    out.push_back(c);
  };
  compare("best RNN >= MLP", best_rnn, best_name, acc(Method::Mlp), "MLP");
  compare("MLP >= FFT+MLP", acc(Method::Mlp), "MLP", acc(Method::FftMlp), "FFT+MLP");
  compare("FFT+MLP >= FFT threshold", acc(Method::FftMlp), "FFT+MLP", acc(Method::FftThreshold), "FFT threshold");
  return out;
}

std::optional<Method> best_rnn(const eval::EvalReport& report) {
  std::optional<Method> best;
  double best_acc = -1.0;
  for (Method m : {Method::Lstm, Method::Gru, Method::Cfc})
    if (const auto* r = report.find(std::string(method_name(m))); r && r->overall() > best_acc) {
      best_acc = r->overall();
      best = m;
    }
  return best;
}

std::vector<Check> accuracy_checks(const eval::EvalReport& report) {
  std::vector<Check> out;
  auto floor_check = [&](Method m, double floor) {
    const auto* r = report.find(std::string(method_name(m)));
    if (!r) return;
    Check c;
    c.name = std::string(method_name(m)) + " overall >= " + fmt9(floor);
    c.pass = r->overall() >= floor;
    c.detail = fmt9(r->overall());
    out.push_back(c);
  };
  for (Method m : {Method::Lstm, Method::Gru, Method::Cfc}) floor_check(m, 0.90);
  floor_check(Method::Mlp, 0.85);

  if (const auto* r = report.find(std::string(method_name(Method::SpeedThreshold)))) {
    const auto sp = r->mode_accuracy(FailureMode::Speeding);
    const auto ls = r->mode_accuracy(FailureMode::LaneShift);
    Check c;
    c.name = "speed threshold: Speeding >= 0.95, LaneShift <= 0.25";
    c.pass = sp && ls && *sp >= 0.95 && *ls <= 0.25;
    c.detail = "Speeding " + (sp ? fmt9(*sp) : "n/a") + ", LaneShift " + (ls ? fmt9(*ls) : "n/a");
    out.push_back(c);
  }
  if (const auto* fft = report.find(std::string(method_name(Method::FftThreshold)))) {
    Check c;
    c.name = "FFT threshold below every learned model";
    c.pass = true;
    c.detail = "FFT " + fmt9(fft->overall());
    for (Method m : kAllMethods) {
      if (!is_learned(m)) continue;
      const auto* r = report.find(std::string(method_name(m)));
      if (!r) continue;
      if (!(fft->overall() < r->overall())) {
        c.pass = false;
        c.detail += "; not below " + std::string(method_name(m)) + " " + fmt9(r->overall());
      }
    }
    out.push_back(c);
  }
  if (const auto* r = report.find(std::string(method_name(Method::Kalman)))) {
    const auto nom = r->mode_accuracy(FailureMode::Nominal);
    double recall = 0.0;
    std::size_t n = 0;
    for (FailureMode m : kAllModes) {
      if (m == FailureMode::Nominal) continue;
      if (auto a = r->mode_accuracy(m)) {
        recall += *a;
        ++n;
      }
    }
    if (n > 0) recall /= static_cast<double>(n);
    Check c;
    c.name = "Kalman: Nominal < 0.60, mean failure recall >= 0.75";
    c.pass = nom && n > 0 && *nom < 0.60 && recall >= 0.75;
    c.detail = "Nominal " + (nom ? fmt9(*nom) : "n/a") + ", recall " + fmt9(recall);
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

nn::Batch random_batch(std::size_t steps, Eigen::Index dim, Eigen::Index batch, Rng& rng) {
  nn::Batch b;
  for (std::size_t t = 0; t < steps; ++t) {
    nn::Matrix x(dim, batch);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    b.steps.push_back(std::move(x));
  }
  b.labels.resize(batch);
  for (Eigen::Index i = 0; i < batch; ++i) b.labels(i) = static_cast<double>(i % 2);
  return b;
}

}  // namespace

std::vector<GradCheckResult> run_grad_checks(std::size_t seeds, double eps, std::uint64_t base_seed, std::size_t L) {
  constexpr Eigen::Index kBatch = 4;
  std::vector<GradCheckResult> out;
  for (std::size_t s = 0; s < seeds; ++s) {
    const std::uint64_t seed = derive_seed(base_seed, s);
    {
      Rng rng(seed);
      const Eigen::Index hidden[] = {128, 32};
      nn::MlpModel m(nn::MlpParams::make(static_cast<Eigen::Index>(3 * L), hidden, 1, nn::Activation::Relu));
      m.net.init(rng);
      const nn::Batch b = random_batch(1, static_cast<Eigen::Index>(3 * L), kBatch, rng);
      out.push_back({"MLP", seed, m.parameter_count(), nn::grad_check(m, b, eps)});
    }
    for (rnn::CellKind kind : {rnn::CellKind::LSTM, rnn::CellKind::GRU, rnn::CellKind::CfC}) {
      Rng rng(seed);
      rnn::FailureNetConfig cfg = rnn::default_config(kind);
      cfg.L = L;
      if (kind != rnn::CellKind::CfC) {
        cfg.hidden = 5;
        cfg.backbone = 7;
        cfg.decoder_hidden = 6;
      }
      rnn::FailureNetModel m(cfg);
      m.init(rng);
      const nn::Batch b = random_batch(L, 3, kBatch, rng);
      m.fit_normalization(b);
      out.push_back({std::string(rnn::cell_kind_name(kind)), seed, m.parameter_count(), nn::grad_check(m, b, eps)});
    }
  }
  return out;
}

}  // namespace failnet::pipeline
