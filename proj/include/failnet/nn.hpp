// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "failnet/core.hpp"
#include "failnet/rng.hpp"

namespace failnet::nn {

/// Column-major double matrix; batches are stored one sample per column.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Trainable tensor with its accumulated gradient.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)) {}
};

std::size_t count_elements(std::span<Param* const> params);
void zero_grads(std::span<Param* const> params);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
void init_uniform(Param& p, Eigen::Index fan_in, Rng& rng);

enum class Activation { Linear, Tanh, Relu, Sigmoid };

std::string_view activation_name(Activation a);
Activation parse_activation(std::string_view s);

/// Numerically stable logistic function.
double sigmoid(double d);
/// Elementwise forms built on the vectorised exp; saturate to exact 0, 1
/// and -1, 1 without overflow.
Matrix sigmoid(const Matrix& d);
Matrix tanh(const Matrix& d);

struct DenseLayer {
  Param weight;  // out x in
  Param bias;    // out x 1
  Activation activation = Activation::Linear;
};

struct MlpParams {
  std::vector<DenseLayer> layers;

  /// Builds in -> hidden[0] -> ... -> out with `hidden_act` on hidden layers
  /// and `out_act` on the last one.
  static MlpParams make(Eigen::Index in, std::span<const Eigen::Index> hidden, Eigen::Index out,
                        Activation hidden_act, Activation out_act = Activation::Linear);

  Eigen::Index input_dim() const;
  Eigen::Index output_dim() const;
  std::size_t parameter_count() const;
  std::vector<Param*> parameters();
  void init(Rng& rng);
};

/// Per-layer activations recorded by the forward pass for backprop.
struct MlpTape {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> outputs;  // post-activation output of each layer
};

/// y = f_n(... f_1(W_1 x + b_1) ...). x is in x batch.
Matrix mlp_forward(const MlpParams& params, const Matrix& x, MlpTape* tape = nullptr);

/// Accumulates parameter gradients from dL/dy and returns dL/dx.
Matrix mlp_backward(MlpParams& params, const MlpTape& tape, const Matrix& dy);

/// Binary cross-entropy of probabilities, averaged over the batch. Rejects
/// probabilities of exactly 0 or 1.
double bce_loss(std::span<const double> z_hat, std::span<const int> z);
double bce_loss(double z_hat, int z);

/// Same loss computed in log-space from pre-sigmoid logits.
double bce_with_logits(const RowVector& logits, const RowVector& labels);
/// dL/dlogits for the batch-mean loss.
RowVector bce_with_logits_grad(const RowVector& logits, const RowVector& labels);

/// A batch for any classifier: one input matrix per time step (a single
/// step for feed-forward models), one label per column.
struct Batch {
  std::vector<Matrix> steps;
  RowVector labels;

  Eigen::Index size() const { return labels.size(); }
  Batch take(std::span<const Eigen::Index> columns) const;
};

/// Binary classifier with reverse-mode gradients.
class Model {
 public:
  virtual ~Model() = default;
  virtual std::vector<Param*> parameters() = 0;
  /// Pre-sigmoid outputs, one per batch column.
  virtual RowVector logits(const Batch& batch) const = 0;
  /// Forward and backward pass of the batch-mean BCE. Gradients are
  /// accumulated into the parameters; the loss is returned.
  virtual double loss_and_gradients(const Batch& batch) = 0;

  virtual double loss(const Batch& batch) const { return bce_with_logits(logits(batch), batch.labels); }
  RowVector predict(const Batch& batch) const;
  std::size_t parameter_count();
};

/// Zeroes gradients, runs the backward pass and returns a copy of every
/// parameter gradient (same order as parameters()).
std::vector<Matrix> backward(Model& model, const Batch& batch);

/// Plain MLP classifier over the first (only) batch step.
class MlpModel : public Model {
 public:
  MlpModel() = default;
  explicit MlpModel(MlpParams p) : net(std::move(p)) {}
  std::vector<Param*> parameters() override { return net.parameters(); }
  RowVector logits(const Batch& batch) const override;
  double loss_and_gradients(const Batch& batch) override;

  MlpParams net;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 64;
  std::size_t epochs = 200;
  std::uint64_t seed = 1;
  std::size_t patience = 20;
  /// Cosine decay from learning_rate to learning_rate * final_lr_fraction
  /// over `epochs`; 1 keeps the rate constant.
  double final_lr_fraction = 1.0;

  void validate() const;
  double learning_rate_at(std::size_t epoch) const;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long long step = 0;
};

/// One bias-corrected Adam update of every parameter from its gradient.
void adam_step(std::span<Param* const> params, AdamState& state, const TrainConfig& cfg);

/// Max relative error between analytic gradients and central differences,
/// with denominator max(|a|, |n|, 1e-8). When max_checks > 0, only that
/// many randomly chosen scalars are probed.
double grad_check(Model& model, const Batch& batch, double eps = 1e-5, std::size_t max_checks = 0,
                  std::uint64_t seed = 0);

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<double> val_accuracy;
  std::size_t best_epoch = 0;
};

/// Minibatch Adam on the batch-mean BCE with early stopping on validation
/// loss. The model is left at its best-validation snapshot.
TrainHistory train(Model& model, const Batch& train_set, const Batch& val_set, const TrainConfig& cfg,
                   const std::function<void(std::size_t, const TrainHistory&)>& on_epoch = {});

// --- checkpoints ------------------------------------------------------------

/// Text checkpoint: versioned header, string attributes, then every
/// parameter with its shape and row-major values at full precision.
struct Checkpoint {
  std::string architecture;
  std::map<std::string, std::string> attributes;
  std::vector<Param> params;

  const std::string& attr(const std::string& key) const;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);

/// Copies values into `params` by name, checking shapes.
void load_params(std::span<Param* const> params, const std::vector<Param>& saved);
std::vector<Param> snapshot(std::span<Param* const> params);

}  // namespace failnet::nn
