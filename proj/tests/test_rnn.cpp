// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "failnet/rnn.hpp"

using namespace failnet;
using namespace failnet::rnn;
using nn::Matrix;

namespace {

using oracle::random_matrix;
using oracle::randomize;

nn::Batch random_seq_batch(std::size_t L, Eigen::Index B, Rng& rng) {
  nn::Batch b;
  for (std::size_t t = 0; t < L; ++t) b.steps.push_back(random_matrix(3, B, rng));
  b.labels.resize(B);
  for (Eigen::Index i = 0; i < B; ++i) b.labels[i] = static_cast<double>(i % 2);
  return b;
}

}  // namespace

TEST_CASE("lstm cell") {
  Rng rng(1);
  auto cell = CellParams::make(CellKind::LSTM, 3, 4);
  const Matrix h0 = Matrix::Zero(4, 2), c0 = Matrix::Zero(4, 2);
  const Matrix x = random_matrix(3, 2, rng);

  SUBCASE("zero parameters and state") {
    auto s = lstm_cell(h0, c0, x, cell);
    CHECK(s.h.isZero(0.0));
  }
  SUBCASE("saturated forget gate carries the cell") {
    randomize(cell, rng);
    cell.at(0).value.middleRows(4, 4).setZero();
    cell.at(1).value.middleRows(4, 4).setZero();
    cell.at(2).value.middleRows(4, 4).setConstant(40.0);
    cell.at(2).value.topRows(4).setConstant(-40.0);  // input gate closed
    const Matrix c = random_matrix(4, 2, rng);
    auto s = lstm_cell(random_matrix(4, 2, rng), c, x, cell);
    CHECK((s.c - c).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("scalar-loop oracle") {
    randomize(cell, rng);
    const Matrix h = random_matrix(4, 3, rng), c = random_matrix(4, 3, rng), p = random_matrix(3, 3, rng);
    auto s = lstm_cell(h, c, p, cell);
    const auto ref = oracle::lstm(h, c, p, cell);
    const double worst = std::max((ref.c - s.c).cwiseAbs().maxCoeff(), (ref.h - s.h).cwiseAbs().maxCoeff());
    CHECK(s.h.cwiseAbs().maxCoeff() <= 1.0);
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("gru cell") {
  Rng rng(2);
  auto cell = CellParams::make(CellKind::GRU, 3, 5);
  randomize(cell, rng);
  const Matrix h = random_matrix(5, 3, rng), p = random_matrix(3, 3, rng);

  SUBCASE("closed update gate is the identity") {
    cell.at(2).value.topRows(5).setConstant(-40.0);
    cell.at(0).value.topRows(5).setZero();
    cell.at(1).value.topRows(5).setZero();
    CHECK((gru_cell(h, p, cell) - h).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("open update gate with zero candidate") {
    cell.at(2).value.topRows(5).setConstant(40.0);
    cell.at(0).value.topRows(5).setZero();
    cell.at(1).value.topRows(5).setZero();
    cell.at(0).value.bottomRows(5).setZero();
    cell.at(1).value.bottomRows(5).setZero();
    cell.at(2).value.bottomRows(5).setZero();
    CHECK(gru_cell(h, p, cell).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("scalar-loop oracle") {
    const Matrix out = gru_cell(h, p, cell);
    const double worst = (oracle::gru(h, p, cell) - out).cwiseAbs().maxCoeff();
    CHECK(out.cwiseAbs().maxCoeff() <= 1.0);
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("cfc cell") {
  Rng rng(3);
  const Eigen::Index n = 4, B = 6;
  auto cell = CellParams::make(CellKind::CfC, 3, n, B);
  randomize(cell, rng);
  const Matrix h = random_matrix(n, 2, rng), p = random_matrix(3, 2, rng);

  auto heads = [&](Eigen::Index col) { return oracle::cfc_heads(h, p, cell, col); };

  SUBCASE("zero time stamp averages the heads") {
    const Matrix out = cfc_cell(h, p, 0.0, cell);
    for (Eigen::Index col = 0; col < 2; ++col) {
      auto hd = heads(col);
      for (Eigen::Index k = 0; k < n; ++k)
        CHECK(out(k, col) == doctest::Approx(0.5 * (hd[1][static_cast<std::size_t>(k)] + hd[2][static_cast<std::size_t>(k)])).epsilon(1e-15));
    }
  }
  SUBCASE("large f saturates toward g2") {
    cell.at(2).value.setZero();
    cell.at(3).value.setConstant(40.0);
    const Matrix out = cfc_cell(h, p, 1.0, cell);
    for (Eigen::Index col = 0; col < 2; ++col) {
      auto hd = heads(col);
      for (Eigen::Index k = 0; k < n; ++k) CHECK(std::abs(out(k, col) - hd[2][static_cast<std::size_t>(k)]) < 1e-15);
    }
  }
  SUBCASE("scalar-loop oracle") {
    const double t = 0.5;
    const Matrix out = cfc_cell(h, p, t, cell);
    const double worst = (oracle::cfc(h, p, t, cell) - out).cwiseAbs().maxCoeff();
    CHECK(worst < 1e-12);
  }
  CHECK_THROWS_AS(cfc_cell(h, p, -1.0, cell), InvalidInput);
  CHECK_THROWS_AS(cfc_cell(h, Matrix::Zero(2, 2), 0.5, cell), InvalidInput);
}

TEST_CASE("parameter counts") {
  FailureNetConfig tiny;
  tiny.kind = CellKind::LSTM;
  tiny.hidden = 1;
  tiny.decoder_hidden = 0;
  FailureNetModel m(tiny);
  CHECK(count_params(m) == 4 * (1 * (1 + 3) + 1) + 2);

  auto within = [](std::size_t got, double target) { return std::abs(static_cast<double>(got) - target) <= 0.15 * target; };
  FailureNetModel lstm(default_config(CellKind::LSTM)), gru(default_config(CellKind::GRU)),
      cfc(default_config(CellKind::CfC));
  CHECK(within(count_params(lstm), 26049));
  CHECK(within(count_params(gru), 21633));
  CHECK(within(count_params(cfc), 1936));
  CHECK(count_params(cfc) < count_params(gru));
  CHECK(count_params(cfc) < count_params(lstm));
  CHECK(count_params(cfc) < 8129);
}

TEST_CASE("forward properties") {
  Rng rng(4);
  for (auto kind : {CellKind::LSTM, CellKind::GRU, CellKind::CfC}) {
    CAPTURE(cell_kind_name(kind));
    FailureNetConfig cfg = default_config(kind);
    cfg.hidden = 6;
    cfg.backbone = 5;
    cfg.decoder_hidden = 4;
    FailureNetModel zero(cfg);
    data::FeatureSeq seq;
    for (int t = 0; t < 10; ++t) seq.steps.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    CHECK(failurenet_forward(zero, seq) == 0.5);

    FailureNetModel m(cfg);
    m.init(rng);
    const double z = failurenet_forward(m, seq);
    CHECK(z > 0.0);
    CHECK(z < 1.0);
    CHECK(failurenet_forward(m, seq) == z);

    nn::Batch b = random_seq_batch(10, 5, rng);
    auto l1 = m.logits(b);
    std::vector<Eigen::Index> perm{4, 1, 2, 3, 0};
    auto l2 = m.logits(b.take(perm));
    // Vectorised kernels may round a column differently by position.
    CHECK(l1[0] == doctest::Approx(l2[4]).epsilon(1e-13));
    CHECK(l1[4] == doctest::Approx(l2[0]).epsilon(1e-13));
    CHECK(l1[2] == doctest::Approx(l2[2]).epsilon(1e-13));

    seq.steps.pop_back();
    CHECK_THROWS_AS(failurenet_forward(m, seq), InvalidInput);
  }
}

TEST_CASE("gradients through the unrolled graph") {
  Rng rng(5);
  for (auto kind : {CellKind::LSTM, CellKind::GRU, CellKind::CfC}) {
    CAPTURE(cell_kind_name(kind));
    FailureNetConfig cfg = default_config(kind);
    cfg.hidden = 5;
    cfg.backbone = 7;
    cfg.decoder_hidden = 6;
    FailureNetModel m(cfg);
    m.init(rng);
    nn::Batch b = random_seq_batch(10, 4, rng);
    m.fit_normalization(b);
    CHECK(nn::grad_check(m, b) < 1e-4);
  }
  SUBCASE("shipped sizes, sampled probes") {
    // Recurrent weights far from the output carry gradients near 1e-8, where
    // eps = 1e-5 differences sit at the roundoff floor; probe at eps = 1e-4.
    for (auto kind : {CellKind::LSTM, CellKind::GRU, CellKind::CfC}) {
      CAPTURE(cell_kind_name(kind));
      FailureNetModel m(default_config(kind));
      m.init(rng);
      nn::Batch b = random_seq_batch(10, 3, rng);
      const double eps = kind == CellKind::CfC ? 1e-5 : 1e-4;
      CHECK(nn::grad_check(m, b, eps, 200, 11) < 1e-4);
    }
  }
}

TEST_CASE("training on toy sequences") {
  Rng rng(6);
  auto make = [&](int n) {
    std::vector<data::FeatureSeq> seqs;
    nn::RowVector labels(n);
    for (int i = 0; i < n; ++i) {
      const int z = i % 2;
      const double base = rng.uniform(-1.0, 1.0);
      data::FeatureSeq s;
      for (int t = 0; t < 10; ++t) {
        const double th = z ? (t % 2 ? 0.6 : -0.6) : 0.3;
        s.steps.push_back({base + 0.1 * t, rng.uniform(-0.05, 0.05), th});
      }
      seqs.push_back(s);
      labels[i] = z;
    }
    return sequence_batch(seqs, labels);
  };
  const nn::Batch tr = make(120), va = make(40);
  FailureNetModel m(default_config(CellKind::CfC));
  Rng init(7);
  m.init(init);
  m.fit_normalization(tr);
  nn::TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.02;
  auto h = nn::train(m, tr, va, cfg);
  CHECK(*std::max_element(h.val_accuracy.begin(), h.val_accuracy.end()) == 1.0);
}

TEST_CASE("identical inputs with both labels converge to the class prior") {
  Rng rng(8);
  data::FeatureSeq s;
  for (int t = 0; t < 10; ++t) s.steps.push_back({0.1 * t, 0.2, 0.0});
  std::vector<data::FeatureSeq> seqs(40, s);
  nn::RowVector labels(40);
  for (int i = 0; i < 40; ++i) labels[i] = i % 2;
  const nn::Batch b = sequence_batch(seqs, labels);
  FailureNetConfig cfg = default_config(CellKind::CfC);
  FailureNetModel m(cfg);
  m.init(rng);
  m.fit_normalization(b);
  nn::TrainConfig tc;
  tc.epochs = 100;
  tc.learning_rate = 0.01;
  tc.batch_size = 40;
  nn::train(m, b, b, tc);
  CHECK(std::abs(failurenet_forward(m, s) - 0.5) < 0.02);
}

TEST_CASE("single-class training split is rejected") {
  data::DatasetSplit split;
  data::PoseWindow w;
  for (int t = 0; t < 10; ++t) w.poses.push_back({0.5 * t, 0.1 * t, 0.0, 0.0});
  split.train = {w, w};
  FailureNetModel m(default_config(CellKind::CfC));
  CHECK_THROWS_AS(train_failurenet(m, split, nn::TrainConfig{}), InvalidInput);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(9);
  FailureNetConfig cfg = default_config(CellKind::GRU);
  cfg.hidden = 6;
  cfg.decoder_hidden = 5;
  cfg.feature_mode = data::FeatureMode::Egocentric;
  FailureNetModel m(cfg);
  m.init(rng);
  nn::Batch b = random_seq_batch(10, 6, rng);
  m.fit_normalization(b);
  const auto path = (std::filesystem::temp_directory_path() / "failnet_rnn_ckpt.txt").string();
  save_failurenet(path, m);
  FailureNetModel back = load_failurenet(path);
  std::filesystem::remove(path);
  CHECK(back.config.kind == CellKind::GRU);
  CHECK(back.config.L == 10);
  CHECK(back.config.feature_mode == data::FeatureMode::Egocentric);
  CHECK(back.in_mean == m.in_mean);
  CHECK(back.in_std == m.in_std);
  CHECK(back.logits(b) == m.logits(b));

  auto ck = to_checkpoint(m);
  ck.architecture = "mlp";
  CHECK_THROWS_AS(from_checkpoint(ck), FormatError);
}
