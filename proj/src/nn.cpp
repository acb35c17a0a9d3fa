// SPDX-License-Identifier: Apache-2.0
#include "failnet/nn.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

namespace failnet::nn {

std::size_t count_elements(std::span<Param* const> params) {
  std::size_t n = 0;
  for (const Param* p : params) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void zero_grads(std::span<Param* const> params) {
  for (Param* p : params) p->grad.setZero(p->value.rows(), p->value.cols());
}

void init_uniform(Param& p, Eigen::Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(fan_in, 1)));
  for (Eigen::Index j = 0; j < p.value.cols(); ++j)
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) p.value(i, j) = rng.uniform(-bound, bound);
  p.grad.setZero(p.value.rows(), p.value.cols());
}

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::Linear: return "linear";
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

Activation parse_activation(std::string_view s) {
  for (auto a : {Activation::Linear, Activation::Tanh, Activation::Relu, Activation::Sigmoid})
    if (activation_name(a) == s) return a;
  throw FormatError("unknown activation '" + std::string(s) + "'");
}

double sigmoid(double d) {
  if (d >= 0) return 1.0 / (1.0 + std::exp(-d));
  const double e = std::exp(d);
  return e / (1.0 + e);
}

Matrix sigmoid(const Matrix& d) { return (1.0 + (-d.array()).exp()).inverse().matrix(); }

Matrix tanh(const Matrix& d) { return (1.0 - 2.0 / ((2.0 * d.array()).exp() + 1.0)).matrix(); }

namespace {

Matrix activate(Activation a, const Matrix& x) {
  switch (a) {
    case Activation::Linear: return x;
    case Activation::Tanh: return nn::tanh(x);
    case Activation::Relu: return x.cwiseMax(0.0);
    case Activation::Sigmoid: return sigmoid(x);
  }
  return x;
}

// dL/da from dL/dy, given the activation output y.
Matrix activation_backward(Activation a, const Matrix& y, const Matrix& dy) {
  switch (a) {
    case Activation::Linear: return dy;
    case Activation::Tanh: return (dy.array() * (1.0 - y.array().square())).matrix();
    case Activation::Relu: return (dy.array() * (y.array() > 0.0).cast<double>()).matrix();
    case Activation::Sigmoid: return (dy.array() * y.array() * (1.0 - y.array())).matrix();
  }
  return dy;
}

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

// ---------------------------------------------------------------------------
// MLP

MlpParams MlpParams::make(Eigen::Index in, std::span<const Eigen::Index> hidden, Eigen::Index out,
                          Activation hidden_act, Activation out_act) {
  MlpParams p;
  Eigen::Index prev = in;
  std::size_t idx = 0;
  auto add = [&](Eigen::Index n, Activation act) {
    DenseLayer layer;
    layer.weight = Param("layer" + std::to_string(idx) + ".weight", n, prev);
    layer.bias = Param("layer" + std::to_string(idx) + ".bias", n, 1);
    layer.activation = act;
    p.layers.push_back(std::move(layer));
    prev = n;
    ++idx;
  };
  for (auto h : hidden) add(h, hidden_act);
  add(out, out_act);
  return p;
}

Eigen::Index MlpParams::input_dim() const { return layers.empty() ? 0 : layers.front().weight.value.cols(); }
Eigen::Index MlpParams::output_dim() const { return layers.empty() ? 0 : layers.back().weight.value.rows(); }

std::size_t MlpParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.value.size() + l.bias.value.size());
  return n;
}

std::vector<Param*> MlpParams::parameters() {
  std::vector<Param*> out;
  for (auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

void MlpParams::init(Rng& rng) {
  for (auto& l : layers) {
    init_uniform(l.weight, l.weight.value.cols(), rng);
    init_uniform(l.bias, l.weight.value.cols(), rng);
  }
}

Matrix mlp_forward(const MlpParams& params, const Matrix& x, MlpTape* tape) {
  if (params.layers.empty()) return x;
  if (x.rows() != params.input_dim())
    throw InvalidInput("mlp_forward: input is " + shape(x) + " but the first layer expects " +
                       std::to_string(params.input_dim()) + " rows (weight " +
                       shape(params.layers.front().weight.value) + ")");
  if (tape) {
    tape->inputs.clear();
    tape->outputs.clear();
  }
  Matrix h = x;
  for (const auto& l : params.layers) {
    Matrix a = l.weight.value * h;
    a.colwise() += l.bias.value.col(0);
    Matrix y = activate(l.activation, a);
    if (tape) {
      tape->inputs.push_back(std::move(h));
      tape->outputs.push_back(y);
    }
    h = std::move(y);
  }
  return h;
}

Matrix mlp_backward(MlpParams& params, const MlpTape& tape, const Matrix& dy) {
  Matrix g = dy;
  for (std::size_t k = params.layers.size(); k-- > 0;) {
    auto& l = params.layers[k];
    const Matrix da = activation_backward(l.activation, tape.outputs[k], g);
    l.weight.grad.noalias() += da * tape.inputs[k].transpose();
    l.bias.grad += da.rowwise().sum();
    g = l.weight.value.transpose() * da;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Loss

double bce_loss(double z_hat, int z) {
  if (z != 0 && z != 1) throw InvalidInput("bce_loss: label must be 0 or 1");
  if (!(z_hat > 0.0 && z_hat < 1.0))
    throw InvalidInput("bce_loss: probability must lie strictly inside (0, 1); use the logit path");
  return z == 1 ? -std::log(z_hat) : -std::log1p(-z_hat);
}

double bce_loss(std::span<const double> z_hat, std::span<const int> z) {
  if (z_hat.size() != z.size() || z.empty()) throw InvalidInput("bce_loss: size mismatch or empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) acc += bce_loss(z_hat[i], z[i]);
  return acc / static_cast<double>(z.size());
}

double bce_with_logits(const RowVector& logits, const RowVector& labels) {
  if (logits.size() != labels.size() || logits.size() == 0)
    throw InvalidInput("bce_with_logits: size mismatch or empty batch");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double d = logits[i];
    acc += std::max(d, 0.0) - d * labels[i] + std::log1p(std::exp(-std::abs(d)));
  }
  return acc / static_cast<double>(logits.size());
}

RowVector bce_with_logits_grad(const RowVector& logits, const RowVector& labels) {
  RowVector g(logits.size());
  const double inv = 1.0 / static_cast<double>(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) g[i] = (sigmoid(logits[i]) - labels[i]) * inv;
  return g;
}

// ---------------------------------------------------------------------------
// Models

Batch Batch::take(std::span<const Eigen::Index> columns) const {
  Batch out;
  const auto n = static_cast<Eigen::Index>(columns.size());
  out.labels.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) out.labels[j] = labels[columns[static_cast<std::size_t>(j)]];
  out.steps.reserve(steps.size());
  for (const auto& s : steps) {
    Matrix m(s.rows(), n);
    for (Eigen::Index j = 0; j < n; ++j) m.col(j) = s.col(columns[static_cast<std::size_t>(j)]);
    out.steps.push_back(std::move(m));
  }
  return out;
}

RowVector Model::predict(const Batch& batch) const {
  RowVector l = logits(batch);
  for (Eigen::Index i = 0; i < l.size(); ++i) l[i] = sigmoid(l[i]);
  return l;
}

std::size_t Model::parameter_count() {
  auto ps = parameters();
  return count_elements(ps);
}

std::vector<Matrix> backward(Model& model, const Batch& batch) {
  auto ps = model.parameters();
  zero_grads(ps);
  model.loss_and_gradients(batch);
  std::vector<Matrix> out;
  out.reserve(ps.size());
  for (const Param* p : ps) out.push_back(p->grad);
  return out;
}

RowVector MlpModel::logits(const Batch& batch) const {
  if (batch.steps.size() != 1) throw InvalidInput("MlpModel expects a single-step batch");
  return mlp_forward(net, batch.steps.front()).row(0);
}

double MlpModel::loss_and_gradients(const Batch& batch) {
  if (batch.steps.size() != 1) throw InvalidInput("MlpModel expects a single-step batch");
  MlpTape tape;
  const RowVector d = mlp_forward(net, batch.steps.front(), &tape).row(0);
  mlp_backward(net, tape, bce_with_logits_grad(d, batch.labels));
  return bce_with_logits(d, batch.labels);
}

// ---------------------------------------------------------------------------
// Optimisation

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || !(epsilon > 0) || batch_size == 0 || epochs == 0)
    throw InvalidInput("train config: hyperparameters must be positive");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1))
    throw InvalidInput("train config: Adam betas must lie in (0, 1)");
  if (!(final_lr_fraction > 0 && final_lr_fraction <= 1))
    throw InvalidInput("train config: final learning-rate fraction must lie in (0, 1]");
}

double TrainConfig::learning_rate_at(std::size_t epoch) const {
  if (final_lr_fraction == 1.0 || epochs < 2) return learning_rate;
  const double progress = static_cast<double>(std::min(epoch, epochs - 1)) / static_cast<double>(epochs - 1);
  const double lo = learning_rate * final_lr_fraction;
  return lo + 0.5 * (learning_rate - lo) * (1.0 + std::cos(std::numbers::pi * progress));
}

void adam_step(std::span<Param* const> params, AdamState& state, const TrainConfig& cfg) {
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const Param* p : params) {
      state.m.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      state.v.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols())
      throw InvalidInput("adam_step: gradient shape mismatch for " + p.name);
    state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * p.grad;
    state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * p.grad.cwiseAbs2();
    p.value.array() -= cfg.learning_rate * (state.m[k].array() / c1) /
                       ((state.v[k].array() / c2).sqrt() + cfg.epsilon);
  }
}

double grad_check(Model& model, const Batch& batch, double eps, std::size_t max_checks, std::uint64_t seed) {
  if (!(eps > 1e-7 && eps < 1e-3)) throw InvalidInput("grad_check: eps must lie in (1e-7, 1e-3)");
  auto ps = model.parameters();
  auto analytic = backward(model, batch);

  struct Probe {
    std::size_t param;
    Eigen::Index index;
  };
  std::vector<Probe> probes;
  for (std::size_t k = 0; k < ps.size(); ++k)
    for (Eigen::Index i = 0; i < ps[k]->value.size(); ++i) probes.push_back({k, i});
  if (max_checks > 0 && probes.size() > max_checks) {
    Rng rng(seed);
    for (std::size_t i = 0; i < max_checks; ++i)
      std::swap(probes[i], probes[i + rng.below(probes.size() - i)]);
    probes.resize(max_checks);
  }

  double worst = 0.0;
  for (const auto& pr : probes) {
    double& w = ps[pr.param]->value.data()[pr.index];
    const double saved = w;
    w = saved + eps;
    const double lp = model.loss(batch);
    w = saved - eps;
    const double lm = model.loss(batch);
    w = saved;
    const double numeric = (lp - lm) / (2.0 * eps);
    const double a = analytic[pr.param].data()[pr.index];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, rel);
  }
  return worst;
}

TrainHistory train(Model& model, const Batch& train_set, const Batch& val_set, const TrainConfig& cfg,
                   const std::function<void(std::size_t, const TrainHistory&)>& on_epoch) {
  cfg.validate();
  if (train_set.size() == 0) throw InvalidInput("train: empty training set");
  auto ps = model.parameters();
  AdamState adam;
  Rng rng(cfg.seed);
  TrainHistory hist;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(train_set.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::vector<Param> best = snapshot(ps);
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  TrainConfig step_cfg = cfg;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    step_cfg.learning_rate = cfg.learning_rate_at(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double acc = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Batch mb = train_set.take(std::span(order).subspan(start, end - start));
      zero_grads(ps);
      acc += model.loss_and_gradients(mb) * static_cast<double>(end - start);
      adam_step(ps, adam, step_cfg);
    }
    hist.train_loss.push_back(acc / static_cast<double>(order.size()));

    double monitored = hist.train_loss.back();
    if (val_set.size() > 0) {
      const RowVector l = model.logits(val_set);
      const double vl = bce_with_logits(l, val_set.labels);
      std::size_t correct = 0;
      for (Eigen::Index i = 0; i < l.size(); ++i)
        correct += static_cast<std::size_t>((l[i] > 0.0) == (val_set.labels[i] > 0.5));
      hist.val_loss.push_back(vl);
      hist.val_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(l.size()));
      monitored = vl;
    }
    if (monitored < best_loss) {
      best_loss = monitored;
      best = snapshot(ps);
      hist.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      if (on_epoch) on_epoch(epoch, hist);
      break;
    }
    if (on_epoch) on_epoch(epoch, hist);
  }
  load_params(ps, best);
  return hist;
}

// ---------------------------------------------------------------------------
// Checkpoints

const std::string& Checkpoint::attr(const std::string& key) const {
  auto it = attributes.find(key);
  if (it == attributes.end()) throw FormatError("checkpoint: missing attribute '" + key + "'");
  return it->second;
}

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os << "failnet-checkpoint 1\n";
  os << "architecture " << ckpt.architecture << '\n';
  for (const auto& [k, v] : ckpt.attributes) os << "attr " << k << ' ' << v << '\n';
  for (const auto& p : ckpt.params) {
    os << "param " << p.name << ' ' << p.value.rows() << ' ' << p.value.cols() << '\n';
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) {
      for (Eigen::Index j = 0; j < p.value.cols(); ++j) os << (j ? " " : "") << fmt17(p.value(i, j));
      os << '\n';
    }
  }
  os << "end\n";
}

Checkpoint read_checkpoint(std::istream& is) {
  Checkpoint ckpt;
  std::string line;
  if (!std::getline(is, line) || line != "failnet-checkpoint 1")
    throw FormatError("checkpoint: unsupported or missing version header");
  bool ended = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "architecture") {
      ss >> ckpt.architecture;
    } else if (key == "attr") {
      std::string k, v;
      ss >> k;
      std::getline(ss >> std::ws, v);
      ckpt.attributes[k] = v;
    } else if (key == "param") {
      Param p;
      Eigen::Index rows = 0, cols = 0;
      ss >> p.name >> rows >> cols;
      if (ss.fail() || rows < 0 || cols < 0) throw FormatError("checkpoint: bad param header: " + line);
      p.value.resize(rows, cols);
      for (Eigen::Index i = 0; i < rows; ++i) {
        if (!std::getline(is, line)) throw FormatError("checkpoint: truncated values for " + p.name);
        std::istringstream vs(line);
        for (Eigen::Index j = 0; j < cols; ++j) {
          std::string tok;
          vs >> tok;
          auto v = parse_double(tok);
          if (!v) throw FormatError("checkpoint: bad value in " + p.name);
          p.value(i, j) = *v;
        }
      }
      p.grad = Matrix::Zero(rows, cols);
      ckpt.params.push_back(std::move(p));
    } else if (key == "end") {
      ended = true;
      break;
    } else {
      throw FormatError("checkpoint: unknown record '" + key + "'");
    }
  }
  if (!ended) throw FormatError("checkpoint: missing end marker");
  return ckpt;
}

void load_params(std::span<Param* const> params, const std::vector<Param>& saved) {
  if (params.size() != saved.size()) throw FormatError("checkpoint: parameter count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Param& s = saved[k];
    Param& p = *params[k];
    if (s.name != p.name || s.value.rows() != p.value.rows() || s.value.cols() != p.value.cols())
      throw FormatError("checkpoint: parameter " + s.name + " (" + shape(s.value) + ") does not match " +
                        p.name + " (" + shape(p.value) + ")");
    p.value = s.value;
  }
}

std::vector<Param> snapshot(std::span<Param* const> params) {
  std::vector<Param> out;
  out.reserve(params.size());
  for (const Param* p : params) {
    Param c;
    c.name = p->name;
    c.value = p->value;
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace failnet::nn
