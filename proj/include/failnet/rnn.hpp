// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "failnet/data.hpp"
#include "failnet/nn.hpp"

namespace failnet::rnn {

using nn::Matrix;
using nn::Param;
using nn::RowVector;

enum class CellKind { LSTM, GRU, CfC };

std::string_view cell_kind_name(CellKind k);
CellKind parse_cell_kind(std::string_view s);

/// Recurrent cell weights. Layouts (rows stacked per gate):
///   LSTM: W (4n x in), U (4n x n), b (4n x 1); gate order i, f, g, o
///   GRU:  W (3n x in), U (3n x n), b (3n x 1); gate order u, r, candidate
///   CfC:  backbone (B x (n+in)) + bias, then heads f (linear), g1, g2 (tanh)
///         each (n x B) + bias
struct CellParams {
  CellKind kind = CellKind::LSTM;
  Eigen::Index input_dim = 3;
  Eigen::Index hidden = 0;
  Eigen::Index backbone = 0;
  std::vector<Param> params;

  static CellParams make(CellKind kind, Eigen::Index input_dim, Eigen::Index hidden,
                         Eigen::Index backbone = 0);
  std::size_t parameter_count() const;
  std::vector<Param*> parameters();
  void init(Rng& rng);

  Param& at(std::size_t i) { return params[i]; }
  const Param& at(std::size_t i) const { return params[i]; }
};

struct LstmState {
  Matrix h;
  Matrix c;
};

/// One step for a batch of columns.
LstmState lstm_cell(const Matrix& h, const Matrix& c, const Matrix& p, const CellParams& cell);
Matrix gru_cell(const Matrix& h, const Matrix& p, const CellParams& cell);
Matrix cfc_cell(const Matrix& h, const Matrix& p, double t_stamp, const CellParams& cell);

/// Intermediates of an unrolled sequence, kept for backprop.
struct CellTape {
  std::vector<Matrix> x, h_prev, c_prev;
  std::vector<std::vector<Matrix>> act;  // per-step gate activations
};

/// Runs the cell over `steps` from a zero state and returns the final h.
Matrix unroll(const CellParams& cell, const std::vector<Matrix>& steps, double t_stamp,
              CellTape* tape = nullptr);

/// Backprop through an unrolled sequence given dL/dh_T. Accumulates into
/// the cell gradients.
void unroll_backward(CellParams& cell, const CellTape& tape, const Matrix& dh_final, double t_stamp);

struct FailureNetConfig {
  CellKind kind = CellKind::CfC;
  Eigen::Index hidden = 16;
  Eigen::Index backbone = 24;
  Eigen::Index decoder_hidden = 16;
  std::size_t L = 10;
  data::FeatureMode feature_mode = data::FeatureMode::Egocentric;
  double t_stamp = 0.5;
  double threshold = 0.5;

  void validate() const;
};

/// Shipped sizes per cell kind.
FailureNetConfig default_config(CellKind kind);

/// Recurrent encoder, tanh decoder and sigmoid head. Inputs are
/// standardised with per-feature mean/std before the cell.
class FailureNetModel : public nn::Model {
 public:
  FailureNetModel() = default;
  explicit FailureNetModel(const FailureNetConfig& cfg);

  std::vector<Param*> parameters() override;
  RowVector logits(const nn::Batch& batch) const override;
  double loss_and_gradients(const nn::Batch& batch) override;

  void init(Rng& rng);
  /// Sets the input normalisation from the statistics of `batch`.
  void fit_normalization(const nn::Batch& batch);

  FailureNetConfig config;
  CellParams cell;
  nn::MlpParams decoder;
  Eigen::Vector3d in_mean = Eigen::Vector3d::Zero();
  Eigen::Vector3d in_std = Eigen::Vector3d::Ones();

 private:
  std::vector<Matrix> normalized(const nn::Batch& batch) const;
};

/// Featurises windows into an L-step batch (one column per window).
nn::Batch sequence_batch(const std::vector<data::PoseWindow>& windows, std::size_t L,
                         data::FeatureMode mode);
nn::Batch sequence_batch(const std::vector<data::FeatureSeq>& seqs, const RowVector& labels);

/// z_hat for one feature sequence. Rejects sequences whose length is not L.
double failurenet_forward(const FailureNetModel& model, const data::FeatureSeq& seq);

std::size_t count_params(FailureNetModel& model);

/// Fits normalisation on the training windows and trains with early
/// stopping on the validation windows.
nn::TrainHistory train_failurenet(FailureNetModel& model, const data::DatasetSplit& split,
                                  const nn::TrainConfig& cfg,
                                  const std::function<void(std::size_t, const nn::TrainHistory&)>& on_epoch = {});

nn::Checkpoint to_checkpoint(FailureNetModel& model);
FailureNetModel from_checkpoint(const nn::Checkpoint& ckpt);
void save_failurenet(const std::string& path, FailureNetModel& model);
FailureNetModel load_failurenet(const std::string& path);

}  // namespace failnet::rnn
