// SPDX-License-Identifier: Apache-2.0
#include "failnet/rnn.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace failnet::rnn {

namespace {

using nn::sigmoid;

Matrix tanh_m(const Matrix& a) { return nn::tanh(a); }

Matrix affine(const Param& w, const Param& b, const Matrix& x) {
  Matrix a = w.value * x;
  a.colwise() += b.value.col(0);
  return a;
}

Matrix dsig(const Matrix& dy, const Matrix& s) { return (dy.array() * s.array() * (1.0 - s.array())).matrix(); }
Matrix dtanh(const Matrix& dy, const Matrix& t) { return (dy.array() * (1.0 - t.array().square())).matrix(); }

void check_dims(const CellParams& cell, const Matrix& h, const Matrix& p) {
  if (p.rows() != cell.input_dim || h.rows() != cell.hidden || h.cols() != p.cols())
    throw InvalidInput("recurrent cell: expected h " + std::to_string(cell.hidden) + "xB and input " +
                       std::to_string(cell.input_dim) + "xB");
}

// CfC parameter slots.
enum : std::size_t { kBbW, kBbB, kFW, kFB, kG1W, kG1B, kG2W, kG2B };

std::string fmt_vec3(const Eigen::Vector3d& v) { return fmt17(v[0]) + " " + fmt17(v[1]) + " " + fmt17(v[2]); }

Eigen::Vector3d parse_vec3(const std::string& s) {
  std::istringstream ss(s);
  Eigen::Vector3d v;
  for (int i = 0; i < 3; ++i) {
    std::string tok;
    ss >> tok;
    auto d = parse_double(tok);
    if (!d) throw FormatError("checkpoint: bad vector '" + s + "'");
    v[i] = *d;
  }
  return v;
}

long long attr_int(const nn::Checkpoint& c, const std::string& key) {
  auto v = parse_int(c.attr(key));
  if (!v) throw FormatError("checkpoint: attribute " + key + " is not an integer");
  return *v;
}

double attr_double(const nn::Checkpoint& c, const std::string& key) {
  auto v = parse_double(c.attr(key));
  if (!v) throw FormatError("checkpoint: attribute " + key + " is not a number");
  return *v;
}

}  // namespace

std::string_view cell_kind_name(CellKind k) {
  switch (k) {
    case CellKind::LSTM: return "lstm";
    case CellKind::GRU: return "gru";
    case CellKind::CfC: return "cfc";
  }
  return "?";
}

CellKind parse_cell_kind(std::string_view s) {
  for (auto k : {CellKind::LSTM, CellKind::GRU, CellKind::CfC})
    if (cell_kind_name(k) == s) return k;
  throw InvalidInput("unknown cell kind '" + std::string(s) + "' (expected lstm, gru or cfc)");
}

// ---------------------------------------------------------------------------
// Cell parameters

CellParams CellParams::make(CellKind kind, Eigen::Index input_dim, Eigen::Index hidden, Eigen::Index backbone) {
  if (input_dim <= 0 || hidden <= 0) throw InvalidInput("cell dimensions must be positive");
  CellParams c;
  c.kind = kind;
  c.input_dim = input_dim;
  c.hidden = hidden;
  switch (kind) {
    case CellKind::LSTM:
    case CellKind::GRU: {
      const Eigen::Index g = kind == CellKind::LSTM ? 4 : 3;
      c.params.emplace_back("cell.W", g * hidden, input_dim);
      c.params.emplace_back("cell.U", g * hidden, hidden);
      c.params.emplace_back("cell.b", g * hidden, 1);
      break;
    }
    case CellKind::CfC:
      if (backbone <= 0) throw InvalidInput("CfC backbone width must be positive");
      c.backbone = backbone;
      c.params.emplace_back("cell.backbone.W", backbone, hidden + input_dim);
      c.params.emplace_back("cell.backbone.b", backbone, 1);
      for (const char* head : {"f", "g1", "g2"}) {
        c.params.emplace_back(std::string("cell.") + head + ".W", hidden, backbone);
        c.params.emplace_back(std::string("cell.") + head + ".b", hidden, 1);
      }
      break;
  }
  return c;
}

std::size_t CellParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::vector<Param*> CellParams::parameters() {
  std::vector<Param*> out;
  for (auto& p : params) out.push_back(&p);
  return out;
}

void CellParams::init(Rng& rng) {
  if (kind == CellKind::CfC) {
    nn::init_uniform(params[kBbW], hidden + input_dim, rng);
    nn::init_uniform(params[kBbB], hidden + input_dim, rng);
    for (std::size_t i = kFW; i < params.size(); ++i) nn::init_uniform(params[i], backbone, rng);
  } else {
    for (auto& p : params) nn::init_uniform(p, hidden, rng);
  }
}

// ---------------------------------------------------------------------------
// Single steps

LstmState lstm_cell(const Matrix& h, const Matrix& c, const Matrix& p, const CellParams& cell) {
  check_dims(cell, h, p);
  const Eigen::Index n = cell.hidden;
  Matrix a = affine(cell.at(0), cell.at(2), p) + cell.at(1).value * h;
  const Matrix i = sigmoid(Matrix(a.topRows(n)));
  const Matrix f = sigmoid(Matrix(a.middleRows(n, n)));
  const Matrix g = tanh_m(a.middleRows(2 * n, n));
  const Matrix o = sigmoid(Matrix(a.bottomRows(n)));
  LstmState s;
  s.c = f.cwiseProduct(c) + i.cwiseProduct(g);
  s.h = o.cwiseProduct(tanh_m(s.c));
  return s;
}

Matrix gru_cell(const Matrix& h, const Matrix& p, const CellParams& cell) {
  check_dims(cell, h, p);
  const Eigen::Index n = cell.hidden;
  const Matrix a = affine(cell.at(0), cell.at(2), p);
  const Matrix& U = cell.at(1).value;
  const Matrix u = sigmoid(Matrix(a.topRows(n) + U.topRows(n) * h));
  const Matrix r = sigmoid(Matrix(a.middleRows(n, n) + U.middleRows(n, n) * h));
  const Matrix cand = tanh_m(a.bottomRows(n) + U.bottomRows(n) * r.cwiseProduct(h));
  return (1.0 - u.array()).matrix().cwiseProduct(h) + u.cwiseProduct(cand);
}

Matrix cfc_cell(const Matrix& h, const Matrix& p, double t_stamp, const CellParams& cell) {
  check_dims(cell, h, p);
  if (!(t_stamp >= 0.0)) throw InvalidInput("cfc_cell: time stamp must be non-negative");
  Matrix cat(h.rows() + p.rows(), h.cols());
  cat << h, p;
  const Matrix z = tanh_m(affine(cell.at(kBbW), cell.at(kBbB), cat));
  const Matrix f = affine(cell.at(kFW), cell.at(kFB), z);
  const Matrix g1 = tanh_m(affine(cell.at(kG1W), cell.at(kG1B), z));
  const Matrix g2 = tanh_m(affine(cell.at(kG2W), cell.at(kG2B), z));
  const Matrix gate = sigmoid(Matrix(-t_stamp * f));
  return gate.cwiseProduct(g1) + (1.0 - gate.array()).matrix().cwiseProduct(g2);
}

// ---------------------------------------------------------------------------
// Unrolling

Matrix unroll(const CellParams& cell, const std::vector<Matrix>& steps, double t_stamp, CellTape* tape) {
  if (steps.empty()) throw InvalidInput("unroll: empty sequence");
  const Eigen::Index n = cell.hidden;
  const Eigen::Index B = steps.front().cols();
  Matrix h = Matrix::Zero(n, B);
  Matrix c = Matrix::Zero(n, B);
  if (tape) *tape = CellTape{};

  for (const Matrix& x : steps) {
    check_dims(cell, h, x);
    if (!tape) {
      switch (cell.kind) {
        case CellKind::LSTM: {
          auto s = lstm_cell(h, c, x, cell);
          h = std::move(s.h);
          c = std::move(s.c);
          break;
        }
        case CellKind::GRU: h = gru_cell(h, x, cell); break;
        case CellKind::CfC: h = cfc_cell(h, x, t_stamp, cell); break;
      }
      continue;
    }
    tape->x.push_back(x);
    tape->h_prev.push_back(h);
    tape->c_prev.push_back(c);
    std::vector<Matrix> act;
    switch (cell.kind) {
      case CellKind::LSTM: {
        Matrix a = affine(cell.at(0), cell.at(2), x) + cell.at(1).value * h;
        Matrix i = sigmoid(Matrix(a.topRows(n)));
        Matrix f = sigmoid(Matrix(a.middleRows(n, n)));
        Matrix g = tanh_m(a.middleRows(2 * n, n));
        Matrix o = sigmoid(Matrix(a.bottomRows(n)));
        c = f.cwiseProduct(c) + i.cwiseProduct(g);
        Matrix tc = tanh_m(c);
        h = o.cwiseProduct(tc);
        act = {i, f, g, o, tc};
        break;
      }
      case CellKind::GRU: {
        const Matrix a = affine(cell.at(0), cell.at(2), x);
        const Matrix& U = cell.at(1).value;
        Matrix u = sigmoid(Matrix(a.topRows(n) + U.topRows(n) * h));
        Matrix r = sigmoid(Matrix(a.middleRows(n, n) + U.middleRows(n, n) * h));
        Matrix rh = r.cwiseProduct(h);
        Matrix cand = tanh_m(a.bottomRows(n) + U.bottomRows(n) * rh);
        h = (1.0 - u.array()).matrix().cwiseProduct(h) + u.cwiseProduct(cand);
        act = {u, r, rh, cand};
        break;
      }
      case CellKind::CfC: {
        Matrix cat(n + x.rows(), B);
        cat << h, x;
        Matrix z = tanh_m(affine(cell.at(kBbW), cell.at(kBbB), cat));
        Matrix f = affine(cell.at(kFW), cell.at(kFB), z);
        Matrix g1 = tanh_m(affine(cell.at(kG1W), cell.at(kG1B), z));
        Matrix g2 = tanh_m(affine(cell.at(kG2W), cell.at(kG2B), z));
        Matrix gate = sigmoid(Matrix(-t_stamp * f));
        h = gate.cwiseProduct(g1) + (1.0 - gate.array()).matrix().cwiseProduct(g2);
        act = {cat, z, g1, g2, gate};
        break;
      }
    }
    tape->act.push_back(std::move(act));
  }
  return h;
}

void unroll_backward(CellParams& cell, const CellTape& tape, const Matrix& dh_final, double t_stamp) {
  const Eigen::Index n = cell.hidden;
  Matrix dh = dh_final;
  Matrix dc = Matrix::Zero(dh.rows(), dh.cols());

  for (std::size_t t = tape.x.size(); t-- > 0;) {
    const Matrix& x = tape.x[t];
    const Matrix& hp = tape.h_prev[t];
    const auto& act = tape.act[t];
    switch (cell.kind) {
      case CellKind::LSTM: {
        const Matrix &i = act[0], &f = act[1], &g = act[2], &o = act[3], &tc = act[4];
        dc += dtanh(dh.cwiseProduct(o), tc);
        Matrix da(4 * n, x.cols());
        da.topRows(n) = dsig(dc.cwiseProduct(g), i);
        da.middleRows(n, n) = dsig(dc.cwiseProduct(tape.c_prev[t]), f);
        da.middleRows(2 * n, n) = dtanh(dc.cwiseProduct(i), g);
        da.bottomRows(n) = dsig(dh.cwiseProduct(tc), o);
        cell.at(0).grad.noalias() += da * x.transpose();
        cell.at(1).grad.noalias() += da * hp.transpose();
        cell.at(2).grad += da.rowwise().sum();
        dc = dc.cwiseProduct(f);
        dh = cell.at(1).value.transpose() * da;
        break;
      }
      case CellKind::GRU: {
        const Matrix &u = act[0], &r = act[1], &rh = act[2], &cand = act[3];
        const Matrix& U = cell.at(1).value;
        Matrix da(3 * n, x.cols());
        da.bottomRows(n) = dtanh(dh.cwiseProduct(u), cand);
        const Matrix drh = U.bottomRows(n).transpose() * da.bottomRows(n);
        da.topRows(n) = dsig(dh.cwiseProduct(cand - hp), u);
        da.middleRows(n, n) = dsig(drh.cwiseProduct(hp), r);
        cell.at(0).grad.noalias() += da * x.transpose();
        cell.at(1).grad.topRows(2 * n).noalias() += da.topRows(2 * n) * hp.transpose();
        cell.at(1).grad.bottomRows(n).noalias() += da.bottomRows(n) * rh.transpose();
        cell.at(2).grad += da.rowwise().sum();
        Matrix dhp = dh.cwiseProduct((1.0 - u.array()).matrix()) + drh.cwiseProduct(r);
        dhp.noalias() += U.topRows(2 * n).transpose() * da.topRows(2 * n);
        dh = std::move(dhp);
        break;
      }
      case CellKind::CfC: {
        const Matrix &cat = act[0], &z = act[1], &g1 = act[2], &g2 = act[3], &gate = act[4];
        const Matrix dg1 = dtanh(dh.cwiseProduct(gate), g1);
        const Matrix dg2 = dtanh(dh.cwiseProduct((1.0 - gate.array()).matrix()), g2);
        const Matrix df = -t_stamp * dsig(dh.cwiseProduct(g1 - g2), gate);
        Matrix dz = Matrix::Zero(z.rows(), z.cols());
        const std::pair<std::size_t, const Matrix*> heads[] = {{kFW, &df}, {kG1W, &dg1}, {kG2W, &dg2}};
        for (const auto& [w, d] : heads) {
          cell.at(w).grad.noalias() += *d * z.transpose();
          cell.at(w + 1).grad += d->rowwise().sum();
          dz.noalias() += cell.at(w).value.transpose() * *d;
        }
        const Matrix daz = dtanh(dz, z);
        cell.at(kBbW).grad.noalias() += daz * cat.transpose();
        cell.at(kBbB).grad += daz.rowwise().sum();
        dh = (cell.at(kBbW).value.transpose() * daz).topRows(n);
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Classifier

void FailureNetConfig::validate() const {
  if (hidden <= 0 || decoder_hidden < 0 || L < 2) throw InvalidInput("failurenet config: bad dimensions");
  if (kind == CellKind::CfC && backbone <= 0) throw InvalidInput("failurenet config: CfC needs a backbone");
  if (!(t_stamp >= 0.0)) throw InvalidInput("failurenet config: time stamp must be non-negative");
  if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidInput("failurenet config: threshold must lie in (0, 1)");
}

FailureNetConfig default_config(CellKind kind) {
  FailureNetConfig c;
  c.kind = kind;
  if (kind == CellKind::CfC) {
    c.hidden = 16;
    c.backbone = 24;
    c.decoder_hidden = 16;
  } else {
    c.hidden = 64;
    c.backbone = 0;
    c.decoder_hidden = 128;
  }
  return c;
}

FailureNetModel::FailureNetModel(const FailureNetConfig& cfg) : config(cfg) {
  cfg.validate();
  cell = CellParams::make(cfg.kind, 3, cfg.hidden, cfg.backbone);
  std::vector<Eigen::Index> hidden;
  if (cfg.decoder_hidden > 0) hidden.push_back(cfg.decoder_hidden);
  decoder = nn::MlpParams::make(cfg.hidden, hidden, 1, nn::Activation::Tanh);
  for (auto& l : decoder.layers) {
    l.weight.name = "decoder." + l.weight.name;
    l.bias.name = "decoder." + l.bias.name;
  }
}

std::vector<Param*> FailureNetModel::parameters() {
  auto out = cell.parameters();
  for (Param* p : decoder.parameters()) out.push_back(p);
  return out;
}

void FailureNetModel::init(Rng& rng) {
  cell.init(rng);
  decoder.init(rng);
}

std::vector<Matrix> FailureNetModel::normalized(const nn::Batch& batch) const {
  if (batch.steps.size() != config.L)
    throw InvalidInput("failurenet: sequence length " + std::to_string(batch.steps.size()) + " != L = " +
                       std::to_string(config.L));
  std::vector<Matrix> out;
  out.reserve(batch.steps.size());
  const Eigen::Vector3d inv = in_std.cwiseInverse();
  for (const Matrix& s : batch.steps) {
    if (s.rows() != 3) throw InvalidInput("failurenet: each step must have 3 features");
    out.push_back(((s.colwise() - in_mean).array().colwise() * inv.array()).matrix());
  }
  return out;
}

void FailureNetModel::fit_normalization(const nn::Batch& batch) {
  Eigen::Vector3d sum = Eigen::Vector3d::Zero(), sq = Eigen::Vector3d::Zero();
  double count = 0;
  for (const Matrix& s : batch.steps) {
    sum += s.rowwise().sum();
    count += static_cast<double>(s.cols());
  }
  if (count == 0) throw InvalidInput("fit_normalization: empty batch");
  in_mean = sum / count;
  for (const Matrix& s : batch.steps) sq += (s.colwise() - in_mean).rowwise().squaredNorm();
  in_std = (sq / count).cwiseSqrt().cwiseMax(1e-6);
}

RowVector FailureNetModel::logits(const nn::Batch& batch) const {
  const Matrix h = unroll(cell, normalized(batch), config.t_stamp);
  return nn::mlp_forward(decoder, h).row(0);
}

double FailureNetModel::loss_and_gradients(const nn::Batch& batch) {
  CellTape tape;
  const Matrix h = unroll(cell, normalized(batch), config.t_stamp, &tape);
  nn::MlpTape dtape;
  const RowVector d = nn::mlp_forward(decoder, h, &dtape).row(0);
  const Matrix dh = nn::mlp_backward(decoder, dtape, nn::bce_with_logits_grad(d, batch.labels));
  unroll_backward(cell, tape, dh, config.t_stamp);
  return nn::bce_with_logits(d, batch.labels);
}

nn::Batch sequence_batch(const std::vector<data::FeatureSeq>& seqs, const RowVector& labels) {
  if (static_cast<Eigen::Index>(seqs.size()) != labels.size())
    throw InvalidInput("sequence_batch: label count mismatch");
  nn::Batch b;
  b.labels = labels;
  if (seqs.empty()) return b;
  const std::size_t L = seqs.front().steps.size();
  const auto B = static_cast<Eigen::Index>(seqs.size());
  b.steps.assign(L, Matrix(3, B));
  for (Eigen::Index j = 0; j < B; ++j) {
    const auto& s = seqs[static_cast<std::size_t>(j)];
    if (s.steps.size() != L) throw InvalidInput("sequence_batch: ragged sequence lengths");
    for (std::size_t t = 0; t < L; ++t)
      for (int k = 0; k < 3; ++k) b.steps[t](k, j) = s.steps[t][static_cast<std::size_t>(k)];
  }
  return b;
}

nn::Batch sequence_batch(const std::vector<data::PoseWindow>& windows, std::size_t L, data::FeatureMode mode) {
  std::vector<data::FeatureSeq> seqs;
  RowVector labels(static_cast<Eigen::Index>(windows.size()));
  seqs.reserve(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (windows[i].poses.size() != L)
      throw InvalidInput("window " + std::to_string(i) + " has " + std::to_string(windows[i].poses.size()) +
                         " poses, expected L = " + std::to_string(L));
    seqs.push_back(data::featurize(windows[i], mode));
    labels[static_cast<Eigen::Index>(i)] = windows[i].label;
  }
  nn::Batch b = sequence_batch(seqs, labels);
  if (windows.empty()) b.steps.assign(L, Matrix(3, 0));
  return b;
}

double failurenet_forward(const FailureNetModel& model, const data::FeatureSeq& seq) {
  if (seq.steps.size() != model.config.L)
    throw InvalidInput("failurenet_forward: sequence length " + std::to_string(seq.steps.size()) +
                       " != L = " + std::to_string(model.config.L));
  const nn::Batch b = sequence_batch(std::vector<data::FeatureSeq>{seq}, RowVector::Zero(1));
  return nn::sigmoid(model.logits(b)[0]);
}

std::size_t count_params(FailureNetModel& model) { return model.parameter_count(); }

nn::TrainHistory train_failurenet(FailureNetModel& model, const data::DatasetSplit& split,
                                  const nn::TrainConfig& cfg,
                                  const std::function<void(std::size_t, const nn::TrainHistory&)>& on_epoch) {
  if (split.train.empty()) throw InvalidInput("train_failurenet: empty training split");
  bool pos = false, neg = false;
  for (const auto& w : split.train) (w.label ? pos : neg) = true;
  if (!(pos && neg)) throw InvalidInput("train_failurenet: training split contains a single class");
  const nn::Batch tr = sequence_batch(split.train, model.config.L, model.config.feature_mode);
  const nn::Batch va = sequence_batch(split.validation, model.config.L, model.config.feature_mode);
  model.fit_normalization(tr);
  return nn::train(model, tr, va, cfg, on_epoch);
}

// ---------------------------------------------------------------------------
// Checkpoints

nn::Checkpoint to_checkpoint(FailureNetModel& model) {
  nn::Checkpoint c;
  c.architecture = "failurenet";
  const auto& cfg = model.config;
  c.attributes["kind"] = std::string(cell_kind_name(cfg.kind));
  c.attributes["L"] = std::to_string(cfg.L);
  c.attributes["hidden"] = std::to_string(cfg.hidden);
  c.attributes["backbone"] = std::to_string(cfg.backbone);
  c.attributes["decoder_hidden"] = std::to_string(cfg.decoder_hidden);
  c.attributes["feature_mode"] = std::string(data::feature_mode_name(cfg.feature_mode));
  c.attributes["t_stamp"] = fmt17(cfg.t_stamp);
  c.attributes["threshold"] = fmt17(cfg.threshold);
  c.attributes["input_mean"] = fmt_vec3(model.in_mean);
  c.attributes["input_std"] = fmt_vec3(model.in_std);
  auto ps = model.parameters();
  c.params = nn::snapshot(ps);
  return c;
}

FailureNetModel from_checkpoint(const nn::Checkpoint& ckpt) {
  if (ckpt.architecture != "failurenet")
    throw FormatError("checkpoint architecture '" + ckpt.architecture + "' is not failurenet");
  FailureNetConfig cfg;
  cfg.kind = parse_cell_kind(ckpt.attr("kind"));
  cfg.L = static_cast<std::size_t>(attr_int(ckpt, "L"));
  cfg.hidden = attr_int(ckpt, "hidden");
  cfg.backbone = attr_int(ckpt, "backbone");
  cfg.decoder_hidden = attr_int(ckpt, "decoder_hidden");
  cfg.feature_mode = data::parse_feature_mode(ckpt.attr("feature_mode"));
  cfg.t_stamp = attr_double(ckpt, "t_stamp");
  cfg.threshold = attr_double(ckpt, "threshold");
  FailureNetModel m(cfg);
  m.in_mean = parse_vec3(ckpt.attr("input_mean"));
  m.in_std = parse_vec3(ckpt.attr("input_std"));
  auto ps = m.parameters();
  nn::load_params(ps, ckpt.params);
  return m;
}

void save_failurenet(const std::string& path, FailureNetModel& model) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path);
  nn::write_checkpoint(os, to_checkpoint(model));
  if (!os) throw FormatError("write failed: " + path);
}

FailureNetModel load_failurenet(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read " + path);
  return from_checkpoint(nn::read_checkpoint(is));
}

}  // namespace failnet::rnn
