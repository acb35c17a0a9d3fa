// SPDX-License-Identifier: Apache-2.0
#include "failnet/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unsupported/Eigen/FFT>

namespace failnet::baselines {

namespace {

std::string vec_to_string(const Eigen::VectorXd& v) {
  std::string s;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt17(v[i]);
  return s;
}

Eigen::VectorXd vec_from_string(const std::string& s) {
  std::istringstream ss(s);
  std::vector<double> vals;
  std::string tok;
  while (ss >> tok) {
    auto v = parse_double(tok);
    if (!v) throw FormatError("bad number '" + tok + "'");
    vals.push_back(*v);
  }
  return Eigen::Map<Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

double need_double(const std::string& tok, const char* what) {
  auto v = parse_double(tok);
  if (!v) throw FormatError(std::string("rules: bad ") + what + " '" + tok + "'");
  return *v;
}

void require_length(const PoseWindow& w, std::size_t min_len, const char* who) {
  if (w.poses.size() < min_len)
    throw InvalidInput(std::string(who) + ": window needs at least " + std::to_string(min_len) + " poses");
}

}  // namespace

std::string_view statistic_name(Statistic s) { return s == Statistic::Avg ? "avg" : "max"; }

Statistic parse_statistic(std::string_view s) {
  if (s == "avg") return Statistic::Avg;
  if (s == "max") return Statistic::Max;
  throw FormatError("unknown statistic '" + std::string(s) + "'");
}

std::string_view rule_feature_name(RuleFeature f) {
  switch (f) {
    case RuleFeature::Speed: return "speed";
    case RuleFeature::FftPower: return "fft";
    case RuleFeature::KalmanResidual: return "kalman";
  }
  return "?";
}

RuleFeature parse_rule_feature(std::string_view s) {
  for (auto f : {RuleFeature::Speed, RuleFeature::FftPower, RuleFeature::KalmanResidual})
    if (rule_feature_name(f) == s) return f;
  throw FormatError("unknown rule feature '" + std::string(s) + "'");
}

double apply_statistic(std::span<const double> values, Statistic s) {
  if (values.empty()) throw InvalidInput("statistic of an empty sequence");
  if (s == Statistic::Max) return *std::max_element(values.begin(), values.end());
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

int threshold_verdict(std::span<const double> values, const ThresholdRule& rule) {
  return apply_statistic(values, rule.statistic) >= rule.threshold ? 1 : 0;
}

ThresholdRule fit_threshold(const std::vector<std::vector<double>>& values, std::span<const int> labels,
                            RuleFeature feature, std::optional<Statistic> only) {
  const std::size_t n = values.size();
  if (n == 0 || labels.size() != n) throw InvalidInput("fit_threshold: empty input or label count mismatch");
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (positives == 0 || positives == n) throw InvalidInput("fit_threshold: both classes must be present");

  ThresholdRule best;
  best.feature = feature;
  std::size_t best_correct = 0;
  bool have = false;

  for (Statistic stat : {Statistic::Avg, Statistic::Max}) {
    if (only && *only != stat) continue;
    std::vector<std::pair<double, int>> scored(n);
    for (std::size_t i = 0; i < n; ++i) scored[i] = {apply_statistic(values[i], stat), labels[i]};
    std::sort(scored.begin(), scored.end());

    // Threshold below index k flags scored[k..n). Walk distinct boundaries.
    std::size_t neg_below = 0, pos_below = 0;
    auto consider = [&](double threshold) {
      const std::size_t correct = neg_below + (positives - pos_below);
      if (!have || correct > best_correct || (correct == best_correct && threshold < best.threshold)) {
        have = true;
        best_correct = correct;
        best.statistic = stat;
        best.threshold = threshold;
      }
    };
    consider(std::nextafter(scored.front().first, -std::numeric_limits<double>::infinity()));
    for (std::size_t k = 0; k < n;) {
      std::size_t j = k;
      while (j < n && scored[j].first == scored[k].first) {
        (scored[j].second ? pos_below : neg_below) += 1;
        ++j;
      }
      if (j < n) {
        double mid = 0.5 * (scored[k].first + scored[j].first);
        if (!(mid > scored[k].first && mid < scored[j].first)) mid = scored[j].first;
        consider(mid);
      } else {
        consider(std::nextafter(scored[k].first, std::numeric_limits<double>::infinity()));
      }
      k = j;
    }
  }
  best.fit_accuracy = static_cast<double>(best_correct) / static_cast<double>(n);
  return best;
}

// ---------------------------------------------------------------------------

std::vector<double> window_speeds(const PoseWindow& w) {
  require_length(w, 2, "window_speeds");
  std::vector<double> out;
  out.reserve(w.poses.size() - 1);
  for (std::size_t t = 1; t < w.poses.size(); ++t) {
    const Pose &a = w.poses[t - 1], &b = w.poses[t];
    const double dt = b.t - a.t;
    if (!(dt > 0.0)) throw InvalidInput("window_speeds: timestamps must increase");
    out.push_back(std::hypot(b.x - a.x, b.y - a.y) / dt);
  }
  return out;
}

int speed_threshold_detect(const PoseWindow& w, const ThresholdRule& rule) {
  return threshold_verdict(window_speeds(w), rule);
}

std::vector<double> fft_yaw_power(const PoseWindow& w) {
  require_length(w, 4, "fft_yaw_power");
  const std::size_t L = w.poses.size();
  std::vector<double> yaw(L);
  yaw[0] = w.poses[0].theta;
  for (std::size_t t = 1; t < L; ++t) yaw[t] = yaw[t - 1] + wrap_angle(w.poses[t].theta - w.poses[t - 1].theta);
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, yaw);
  std::vector<double> out;
  for (std::size_t k = 2; k <= L / 2; ++k) out.push_back(std::norm(spec[k]));
  return out;
}

int fft_threshold_detect(const PoseWindow& w, const ThresholdRule& rule) {
  return threshold_verdict(fft_yaw_power(w), rule);
}

// ---------------------------------------------------------------------------

void KalmanConfig::validate() const {
  if (!(q > 0) || !(r > 0) || !(velocity_prior > 0)) throw InvalidInput("kalman: noise scales must be positive");
  if (!(delta > 0) || !std::isfinite(delta)) throw InvalidInput("kalman: threshold must be positive");
}

KalmanState kalman_init(const Pose& first, const KalmanConfig& cfg) {
  KalmanState s;
  s.x << first.x, first.y, first.theta, 0, 0, 0;
  s.P.setZero();
  s.P.diagonal() << cfg.r, cfg.r, cfg.r, cfg.velocity_prior, cfg.velocity_prior, cfg.velocity_prior;
  return s;
}

void kalman_predict(KalmanState& s, double dt, const KalmanConfig& cfg) {
  KMat F = KMat::Identity();
  F.topRightCorner<3, 3>() = dt * Eigen::Matrix3d::Identity();
  KMat Q = KMat::Zero();
  const Eigen::Matrix3d I3 = Eigen::Matrix3d::Identity();
  Q.topLeftCorner<3, 3>() = cfg.q * dt * dt * dt / 3.0 * I3;
  Q.topRightCorner<3, 3>() = cfg.q * dt * dt / 2.0 * I3;
  Q.bottomLeftCorner<3, 3>() = cfg.q * dt * dt / 2.0 * I3;
  Q.bottomRightCorner<3, 3>() = cfg.q * dt * I3;
  s.x = F * s.x;
  s.P = F * s.P * F.transpose() + Q;
}

double kalman_update(KalmanState& s, const Pose& obs, const KalmanConfig& cfg) {
  Eigen::Matrix<double, 3, 6> H = Eigen::Matrix<double, 3, 6>::Zero();
  H.leftCols<3>().setIdentity();
  Eigen::Vector3d y(obs.x - s.x[0], obs.y - s.x[1], wrap_angle(obs.theta - s.x[2]));
  const Eigen::Matrix3d S = H * s.P * H.transpose() + cfg.r * Eigen::Matrix3d::Identity();
  const Eigen::Matrix<double, 6, 3> K = s.P * H.transpose() * S.inverse();
  s.x += K * y;
  const KMat A = KMat::Identity() - K * H;
  s.P = A * s.P * A.transpose() + cfg.r * K * K.transpose();
  return std::hypot(obs.x - s.x[0], obs.y - s.x[1]);
}

std::vector<double> kalman_residuals(const PoseWindow& w, const KalmanConfig& cfg) {
  cfg.validate();
  require_length(w, cfg.warmup + 1, "kalman_residuals");
  KalmanState s = kalman_init(w.poses[0], cfg);
  std::vector<double> out;
  for (std::size_t t = 1; t < w.poses.size(); ++t) {
    const double dt = w.poses[t].t - w.poses[t - 1].t;
    if (!(dt > 0.0)) throw InvalidInput("kalman_residuals: timestamps must increase");
    kalman_predict(s, dt, cfg);
    const double res = kalman_update(s, w.poses[t], cfg);
    if (Eigen::LLT<KMat>(s.P).info() != Eigen::Success)
      throw InvalidInput("kalman_residuals: covariance lost positive definiteness at step " + std::to_string(t));
    if (t >= cfg.warmup) out.push_back(res);
  }
  return out;
}

int kalman_detect(const PoseWindow& w, const KalmanConfig& cfg) {
  return apply_statistic(kalman_residuals(w, cfg), cfg.aggregation) > cfg.delta ? 1 : 0;
}

KalmanConfig fit_kalman(const std::vector<PoseWindow>& windows, std::span<const double> q_grid,
                        std::span<const double> r_grid, const KalmanConfig& base, double* accuracy_out) {
  if (q_grid.empty() || r_grid.empty()) throw InvalidInput("fit_kalman: empty grid");
  std::vector<int> labels;
  labels.reserve(windows.size());
  for (const auto& w : windows) labels.push_back(w.label);
  KalmanConfig best = base;
  double best_acc = -1.0;
  for (double q : q_grid) {
    for (double r : r_grid) {
      KalmanConfig c = base;
      c.q = q;
      c.r = r;
      std::vector<std::vector<double>> res;
      res.reserve(windows.size());
      for (const auto& w : windows) res.push_back(kalman_residuals(w, c));
      const ThresholdRule rule = fit_threshold(res, labels, RuleFeature::KalmanResidual, base.aggregation);
      if (rule.fit_accuracy > best_acc) {
        best_acc = rule.fit_accuracy;
        best = c;
        // fitted midpoints never coincide with a score, so ">" and ">=" agree
        best.delta = rule.threshold;
      }
    }
  }
  if (!(best.delta > 0)) best.delta = std::numeric_limits<double>::min();
  if (accuracy_out) *accuracy_out = best_acc;
  return best;
}

// ---------------------------------------------------------------------------

std::string_view prefilter_name(PreFilter p) {
  switch (p) {
    case PreFilter::None: return "raw";
    case PreFilter::Speed: return "speed";
    case PreFilter::Fft: return "fft";
  }
  return "?";
}

PreFilter parse_prefilter(std::string_view s) {
  for (auto p : {PreFilter::None, PreFilter::Speed, PreFilter::Fft})
    if (prefilter_name(p) == s) return p;
  throw InvalidInput("unknown pre-filter '" + std::string(s) + "'");
}

Eigen::Index prefilter_dim(PreFilter p, std::size_t L) {
  switch (p) {
    case PreFilter::None: return static_cast<Eigen::Index>(3 * L);
    case PreFilter::Speed: return static_cast<Eigen::Index>(L - 1);
    case PreFilter::Fft: return static_cast<Eigen::Index>(L / 2 - 1);
  }
  return 0;
}

nn::MlpParams default_mlp(PreFilter p, std::size_t L) {
  const Eigen::Index hidden[] = {128, 32};
  return nn::MlpParams::make(prefilter_dim(p, L), hidden, 1, nn::Activation::Relu);
}

MlpDetector::MlpDetector(PreFilter p, std::size_t len, data::FeatureMode mode)
    : prefilter(p), L(len), feature_mode(mode), model(default_mlp(p, len)) {
  const Eigen::Index d = prefilter_dim(p, len);
  in_mean = Eigen::VectorXd::Zero(d);
  in_std = Eigen::VectorXd::Ones(d);
}

Eigen::VectorXd MlpDetector::features(const PoseWindow& w) const {
  if (w.poses.size() != L)
    throw InvalidInput("mlp detector: window has " + std::to_string(w.poses.size()) + " poses, expected " +
                       std::to_string(L));
  std::vector<double> v;
  switch (prefilter) {
    case PreFilter::None:
      for (const auto& f : data::featurize(w, feature_mode).steps) v.insert(v.end(), f.begin(), f.end());
      break;
    case PreFilter::Speed: v = window_speeds(w); break;
    case PreFilter::Fft: v = fft_yaw_power(w); break;
  }
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

nn::Batch MlpDetector::batch(const std::vector<PoseWindow>& windows) const {
  nn::Batch b;
  const auto n = static_cast<Eigen::Index>(windows.size());
  b.steps.emplace_back(prefilter_dim(prefilter, L), n);
  b.labels.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    b.steps[0].col(j) = features(windows[static_cast<std::size_t>(j)]);
    b.labels[j] = windows[static_cast<std::size_t>(j)].label;
  }
  return b;
}

void MlpDetector::fit_normalization(const nn::Batch& raw) {
  const nn::Matrix& x = raw.steps.at(0);
  if (x.cols() == 0) throw InvalidInput("mlp detector: empty batch");
  in_mean = x.rowwise().mean();
  in_std = ((x.colwise() - in_mean).rowwise().squaredNorm() / static_cast<double>(x.cols())).cwiseSqrt().cwiseMax(1e-6);
}

nn::Batch MlpDetector::normalized(nn::Batch b) const {
  b.steps[0] = ((b.steps[0].colwise() - in_mean).array().colwise() / in_std.array()).matrix();
  return b;
}

double MlpDetector::predict(const PoseWindow& w) const {
  nn::Batch b;
  b.steps.emplace_back(((features(w) - in_mean).array() / in_std.array()).matrix());
  b.labels = nn::RowVector::Zero(1);
  return nn::sigmoid(model.logits(b)[0]);
}

nn::TrainHistory train_mlp_detector(MlpDetector& det, const data::DatasetSplit& split, const nn::TrainConfig& cfg) {
  if (split.train.empty()) throw InvalidInput("train_mlp_detector: empty training split");
  const nn::Batch tr = det.batch(split.train);
  det.fit_normalization(tr);
  return nn::train(det.model, det.normalized(tr), det.normalized(det.batch(split.validation)), cfg);
}

nn::Checkpoint to_checkpoint(MlpDetector& det) {
  nn::Checkpoint c;
  c.architecture = "mlp";
  c.attributes["prefilter"] = std::string(prefilter_name(det.prefilter));
  c.attributes["L"] = std::to_string(det.L);
  c.attributes["feature_mode"] = std::string(data::feature_mode_name(det.feature_mode));
  c.attributes["hidden_activation"] =
      std::string(nn::activation_name(det.model.net.layers.front().activation));
  c.attributes["input_mean"] = vec_to_string(det.in_mean);
  c.attributes["input_std"] = vec_to_string(det.in_std);
  auto ps = det.model.parameters();
  c.params = nn::snapshot(ps);
  return c;
}

MlpDetector mlp_from_checkpoint(const nn::Checkpoint& ckpt) {
  if (ckpt.architecture != "mlp") throw FormatError("checkpoint architecture '" + ckpt.architecture + "' is not mlp");
  MlpDetector d;
  d.prefilter = parse_prefilter(ckpt.attr("prefilter"));
  auto L = parse_int(ckpt.attr("L"));
  if (!L || *L < 4) throw FormatError("checkpoint: bad L");
  d.L = static_cast<std::size_t>(*L);
  d.feature_mode = data::parse_feature_mode(ckpt.attr("feature_mode"));
  const auto act = nn::parse_activation(ckpt.attr("hidden_activation"));
  if (ckpt.params.size() < 2 || ckpt.params.size() % 2) throw FormatError("checkpoint: malformed mlp layers");
  std::vector<Eigen::Index> hidden;
  for (std::size_t k = 0; k + 2 < ckpt.params.size(); k += 2) hidden.push_back(ckpt.params[k].value.rows());
  d.model = nn::MlpModel(nn::MlpParams::make(ckpt.params.front().value.cols(), hidden,
                                             ckpt.params.back().value.rows(), act));
  auto ps = d.model.parameters();
  nn::load_params(ps, ckpt.params);
  d.in_mean = vec_from_string(ckpt.attr("input_mean"));
  d.in_std = vec_from_string(ckpt.attr("input_std"));
  if (d.in_mean.size() != prefilter_dim(d.prefilter, d.L) || d.in_std.size() != d.in_mean.size() ||
      d.model.net.input_dim() != d.in_mean.size())
    throw FormatError("checkpoint: mlp input width does not match its pre-filter");
  return d;
}

// ---------------------------------------------------------------------------

void write_rules(std::ostream& os, const RuleSet& rules) {
  os << "failnet-rules 1\n";
  for (const auto* r : {rules.speed ? &*rules.speed : nullptr, rules.fft ? &*rules.fft : nullptr})
    if (r)
      os << rule_feature_name(r->feature) << ' ' << statistic_name(r->statistic) << ' ' << fmt17(r->threshold)
         << ' ' << fmt17(r->fit_accuracy) << '\n';
  if (rules.kalman) {
    const auto& k = *rules.kalman;
    os << "kalman " << statistic_name(k.aggregation) << ' ' << fmt17(k.delta) << ' '
       << fmt17(rules.kalman_fit_accuracy) << ' ' << fmt17(k.q) << ' ' << fmt17(k.r) << ' ' << k.warmup << ' '
       << fmt17(k.velocity_prior) << '\n';
  }
  os << "end\n";
}

RuleSet read_rules(std::istream& is) {
  RuleSet rules;
  std::string line;
  if (!std::getline(is, line) || line != "failnet-rules 1") throw FormatError("rules: missing version header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line == "end") return rules;
    std::istringstream ss(line);
    std::string feat, stat, thr, acc;
    ss >> feat >> stat >> thr >> acc;
    if (ss.fail()) throw FormatError("rules: malformed line '" + line + "'");
    const RuleFeature f = parse_rule_feature(feat);
    if (f == RuleFeature::KalmanResidual) {
      std::string q, r, warm, vp;
      ss >> q >> r >> warm >> vp;
      if (ss.fail()) throw FormatError("rules: malformed kalman line '" + line + "'");
      KalmanConfig k;
      k.aggregation = parse_statistic(stat);
      k.delta = need_double(thr, "threshold");
      k.q = need_double(q, "q");
      k.r = need_double(r, "r");
      auto w = parse_int(warm);
      if (!w || *w < 0) throw FormatError("rules: bad warm-up");
      k.warmup = static_cast<std::size_t>(*w);
      k.velocity_prior = need_double(vp, "velocity prior");
      k.validate();
      rules.kalman = k;
      rules.kalman_fit_accuracy = need_double(acc, "accuracy");
    } else {
      ThresholdRule r;
      r.feature = f;
      r.statistic = parse_statistic(stat);
      r.threshold = need_double(thr, "threshold");
      r.fit_accuracy = need_double(acc, "accuracy");
      (f == RuleFeature::Speed ? rules.speed : rules.fft) = r;
    }
  }
  throw FormatError("rules: missing end marker");
}

}  // namespace failnet::baselines
