// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <sstream>
#include <vector>

#include "failnet/nn.hpp"

using namespace failnet;
using namespace failnet::nn;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.uniform(-1.0, 1.0);
  return m;
}

Batch random_batch(Eigen::Index dim, Eigen::Index n, Rng& rng) {
  Batch b;
  b.steps.push_back(random_matrix(dim, n, rng));
  b.labels.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) b.labels[i] = static_cast<double>(i % 2);
  return b;
}

// Affine map y = W x + b with a probe loss instead of BCE.
class ProbeModel : public Model {
 public:
  enum class Loss { Linear, Quadratic };
  ProbeModel(Eigen::Index in, Eigen::Index out, Loss kind, Rng& rng) : kind_(kind) {
    const Eigen::Index hidden[] = {0};
    net = MlpParams::make(in, std::span(hidden, 0), out, Activation::Linear);
    net.init(rng);
    coeff = random_matrix(out, 1, rng);
  }
  std::vector<Param*> parameters() override { return net.parameters(); }
  RowVector logits(const Batch& b) const override { return mlp_forward(net, b.steps[0]).row(0); }
  double loss(const Batch& b) const override { return probe(mlp_forward(net, b.steps[0])); }
  double loss_and_gradients(const Batch& b) override {
    MlpTape tape;
    Matrix y = mlp_forward(net, b.steps[0], &tape);
    Matrix dy = kind_ == Loss::Linear ? Matrix(coeff.replicate(1, y.cols())) : Matrix(y);
    mlp_backward(net, tape, dy);
    return probe(y);
  }
  double probe(const Matrix& y) const {
    if (kind_ == Loss::Linear) return (coeff.transpose() * y).sum();
    return 0.5 * y.squaredNorm();
  }

  MlpParams net;
  Matrix coeff;

 private:
  Loss kind_;
};

}  // namespace

TEST_CASE("mlp_forward trivial cases") {
  const Eigen::Index hidden[] = {4};
  auto p = MlpParams::make(3, hidden, 2, Activation::Linear);
  Matrix x = Matrix::Constant(3, 5, 0.7);
  CHECK(mlp_forward(p, x).isZero(0.0));

  const Eigen::Index none[] = {0};
  auto id = MlpParams::make(3, std::span(none, 0), 3, Activation::Linear);
  id.layers[0].weight.value.setIdentity();
  Rng rng(3);
  Matrix r = random_matrix(3, 4, rng);
  CHECK((mlp_forward(id, r) - r).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(mlp_forward(p, Matrix::Zero(4, 1)), InvalidInput);
  try {
    mlp_forward(p, Matrix::Zero(4, 1));
  } catch (const InvalidInput& e) {
    CHECK(std::string(e.what()).find("4x1") != std::string::npos);
    CHECK(std::string(e.what()).find("4x3") != std::string::npos);
  }
}

TEST_CASE("mlp_forward matches a scalar-loop oracle") {
  Rng rng(11);
  const Eigen::Index hidden[] = {7, 5};
  auto p = MlpParams::make(4, hidden, 2, Activation::Tanh, Activation::Sigmoid);
  p.init(rng);
  Matrix x = random_matrix(4, 6, rng);
  Matrix y = mlp_forward(p, x);

  double worst = 0.0;
  for (Eigen::Index col = 0; col < x.cols(); ++col) {
    std::vector<double> h(x.col(col).data(), x.col(col).data() + 4);
    for (std::size_t k = 0; k < p.layers.size(); ++k) {
      const auto& W = p.layers[k].weight.value;
      const auto& b = p.layers[k].bias.value;
      std::vector<double> out(static_cast<std::size_t>(W.rows()));
      for (Eigen::Index i = 0; i < W.rows(); ++i) {
        double a = b(i, 0);
        for (Eigen::Index j = 0; j < W.cols(); ++j) a += W(i, j) * h[static_cast<std::size_t>(j)];
        out[static_cast<std::size_t>(i)] = k + 1 < p.layers.size() ? std::tanh(a) : 1.0 / (1.0 + std::exp(-a));
      }
      h = out;
    }
    for (Eigen::Index i = 0; i < 2; ++i) worst = std::max(worst, std::abs(h[static_cast<std::size_t>(i)] - y(i, col)));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("parameter count equals the summed element count") {
  const Eigen::Index hidden[] = {128, 32};
  auto p = MlpParams::make(30, hidden, 1, Activation::Relu);
  CHECK(p.parameter_count() == 8129);
  auto ps = p.parameters();
  CHECK(count_elements(ps) == 8129);
}

TEST_CASE("sigmoid") {
  CHECK(sigmoid(0.0) == 0.5);
  const double s = sigmoid(-40.0);
  CHECK(s > 0.0);
  CHECK(s < 1e-17);
  CHECK(sigmoid(700.0) == 1.0);
  CHECK(sigmoid(-700.0) > 0.0);
  Rng rng(5);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double d = rng.uniform(-50.0, 50.0);
    worst = std::max(worst, std::abs(sigmoid(d) + sigmoid(-d) - 1.0));
  }
  CHECK(worst < 1e-15);
}

TEST_CASE("bce loss") {
  CHECK(bce_loss(0.5, 0) == doctest::Approx(0.6931471805).epsilon(1e-10));
  CHECK(bce_loss(0.5, 1) == doctest::Approx(0.6931471805).epsilon(1e-10));
  CHECK(bce_loss(0.9999, 1) == doctest::Approx(1.00005e-4).epsilon(1e-4));
  CHECK_THROWS_AS(bce_loss(0.0, 0), InvalidInput);
  CHECK_THROWS_AS(bce_loss(1.0, 1), InvalidInput);
  CHECK_THROWS_AS(bce_loss(0.5, 2), InvalidInput);

  Rng rng(8);
  std::vector<double> zh;
  std::vector<int> z;
  RowVector logits(50), labels(50);
  for (int i = 0; i < 50; ++i) {
    logits[i] = rng.uniform(-6.0, 6.0);
    zh.push_back(sigmoid(logits[i]));
    z.push_back(static_cast<int>(rng.below(2)));
    labels[i] = z.back();
  }
  double loop = 0.0;
  for (int i = 0; i < 50; ++i)
    loop += -(z[static_cast<std::size_t>(i)] * std::log(zh[static_cast<std::size_t>(i)]) +
              (1 - z[static_cast<std::size_t>(i)]) * std::log(1 - zh[static_cast<std::size_t>(i)]));
  loop /= 50;
  CHECK(bce_loss(zh, z) == doctest::Approx(loop).epsilon(1e-12));
  CHECK(bce_with_logits(logits, labels) == doctest::Approx(loop).epsilon(1e-12));

  // log-space path stays finite where probabilities saturate
  RowVector big(2), lab(2);
  big << 800.0, -800.0;
  lab << 0.0, 1.0;
  CHECK(bce_with_logits(big, lab) == doctest::Approx(800.0));
  CHECK(bce_with_logits(RowVector::Constant(1, 60.0), RowVector::Ones(1)) >= 0.0);
}

TEST_CASE("backward") {
  Rng rng(21);
  SUBCASE("saturated correct predictions give near-zero gradients") {
    const Eigen::Index hidden[] = {6};
    MlpModel m(MlpParams::make(3, hidden, 1, Activation::Tanh));
    m.net.init(rng);
    m.net.layers.back().weight.value.setZero();
    m.net.layers.back().bias.value.setConstant(40.0);
    Batch b = random_batch(3, 8, rng);
    b.labels.setOnes();
    for (const auto& g : backward(m, b)) CHECK(g.cwiseAbs().maxCoeff() < 1e-16);
  }
  SUBCASE("affine layer with quadratic probe matches the closed form") {
    ProbeModel m(4, 3, ProbeModel::Loss::Quadratic, rng);
    Batch b = random_batch(4, 5, rng);
    auto grads = backward(m, b);
    const Matrix& W = m.net.layers[0].weight.value;
    const Matrix& bias = m.net.layers[0].bias.value;
    Matrix y = W * b.steps[0];
    y.colwise() += bias.col(0);
    const Matrix dW = y * b.steps[0].transpose();
    const Matrix db = y.rowwise().sum();
    CHECK((grads[0] - dW).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((grads[1] - db).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("adam") {
  TrainConfig cfg;
  Param p("w", 2, 1);
  p.value << 1.0, -2.0;
  std::vector<Param*> ps{&p};
  AdamState st;

  p.grad.setZero();
  adam_step(ps, st, cfg);
  CHECK(p.value(0, 0) == 1.0);
  CHECK(p.value(1, 0) == -2.0);

  AdamState fresh;
  p.grad << 3.0, -0.02;
  adam_step(ps, fresh, cfg);
  CHECK(p.value(0, 0) - 1.0 == doctest::Approx(-cfg.learning_rate).epsilon(1e-6));
  CHECK(p.value(1, 0) + 2.0 == doctest::Approx(cfg.learning_rate).epsilon(1e-5));

  // minimise (w - 3)^2
  Param q("q", 1, 1);
  std::vector<Param*> qs{&q};
  AdamState qs_state;
  TrainConfig qc;
  qc.learning_rate = 0.05;
  int steps = 0;
  for (; steps < 2000; ++steps) {
    q.grad(0, 0) = 2.0 * (q.value(0, 0) - 3.0);
    adam_step(qs, qs_state, qc);
    if (std::abs(q.value(0, 0) - 3.0) < 1e-6 && std::abs(q.grad(0, 0)) < 1e-5) break;
  }
  CHECK(steps < 2000);
  CHECK(std::abs(q.value(0, 0) - 3.0) < 1e-6);
}

TEST_CASE("grad_check") {
  Rng rng(33);
  SUBCASE("linear model, linear loss") {
    ProbeModel m(5, 2, ProbeModel::Loss::Linear, rng);
    CHECK(grad_check(m, random_batch(5, 4, rng)) < 1e-10);
  }
  SUBCASE("tanh MLP under BCE") {
    const Eigen::Index hidden[] = {8, 6};
    MlpModel m(MlpParams::make(4, hidden, 1, Activation::Tanh));
    m.net.init(rng);
    CHECK(grad_check(m, random_batch(4, 5, rng)) < 1e-4);
  }
  SUBCASE("sampled probes") {
    const Eigen::Index hidden[] = {16};
    MlpModel m(MlpParams::make(4, hidden, 1, Activation::Tanh));
    m.net.init(rng);
    CHECK(grad_check(m, random_batch(4, 5, rng), 1e-5, 20, 7) < 1e-4);
  }
  SUBCASE("eps range") {
    ProbeModel m(2, 1, ProbeModel::Loss::Linear, rng);
    CHECK_THROWS_AS(grad_check(m, random_batch(2, 2, rng), 1e-2), InvalidInput);
    CHECK_THROWS_AS(grad_check(m, random_batch(2, 2, rng), 1e-8), InvalidInput);
  }
}

TEST_CASE("training") {
  Rng rng(2);
  // separable: label = x0 > 0
  auto make = [&](Eigen::Index n) {
    Batch b;
    b.steps.push_back(random_matrix(2, n, rng));
    b.labels.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) b.labels[i] = b.steps[0](0, i) > 0 ? 1.0 : 0.0;
    return b;
  };
  Batch tr = make(200), va = make(100);
  const Eigen::Index hidden[] = {8};
  auto run = [&] {
    Rng init(4);
    MlpModel m(MlpParams::make(2, hidden, 1, Activation::Tanh));
    m.net.init(init);
    TrainConfig cfg;
    cfg.learning_rate = 0.02;
    cfg.epochs = 60;
    cfg.batch_size = 32;
    auto h = train(m, tr, va, cfg);
    return std::pair(m.net.layers[0].weight.value, h);
  };
  auto [w1, h1] = run();
  auto [w2, h2] = run();
  CHECK(w1 == w2);
  CHECK(h1.val_accuracy[h1.best_epoch] > 0.95);
  CHECK(h1.train_loss.back() < h1.train_loss.front());

  TrainConfig bad;
  bad.beta1 = 1.0;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(9);
  const Eigen::Index hidden[] = {5};
  auto p = MlpParams::make(3, hidden, 1, Activation::Tanh);
  p.init(rng);
  Checkpoint c;
  c.architecture = "mlp";
  c.attributes["input"] = "3";
  c.attributes["note"] = "two words";
  auto ps = p.parameters();
  c.params = snapshot(ps);
  std::stringstream ss;
  write_checkpoint(ss, c);
  Checkpoint back = read_checkpoint(ss);
  CHECK(back.architecture == "mlp");
  CHECK(back.attr("note") == "two words");
  CHECK_THROWS_AS(back.attr("missing"), FormatError);

  auto q = MlpParams::make(3, hidden, 1, Activation::Tanh);
  auto qs = q.parameters();
  load_params(qs, back.params);
  for (std::size_t k = 0; k < ps.size(); ++k) CHECK(ps[k]->value == qs[k]->value);

  auto wrong = MlpParams::make(3, std::span(hidden, 1), 2, Activation::Tanh);
  auto ws = wrong.parameters();
  CHECK_THROWS_AS(load_params(ws, back.params), FormatError);

  std::stringstream bad("failnet-checkpoint 9\n");
  CHECK_THROWS_AS(read_checkpoint(bad), FormatError);
  std::stringstream trunc("failnet-checkpoint 1\narchitecture mlp\nparam w 2 2\n1 2\n");
  CHECK_THROWS_AS(read_checkpoint(trunc), FormatError);
}
