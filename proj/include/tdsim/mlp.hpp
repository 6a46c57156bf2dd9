#pragma once

#include <Eigen/Dense>
#include <string>

#include "tdsim/rng.hpp"

namespace tdsim {

// Execution policy for the batch kernels. Both paths compute every matrix
// entry with the same serial inner-loop order, so results are bitwise
// identical for any thread count; kParallel only distributes independent
// rows/columns across OpenMP threads.
enum class ExecPolicy { kSerial, kParallel };

struct TrainBatch {
  Eigen::MatrixXd inputs;   // in_dim x n, one sample per column
  Eigen::MatrixXd targets;  // out_dim x n
  int size() const { return static_cast<int>(inputs.cols()); }
};

// Three-layer perceptron: sigmoid hidden layer, identity output. Affine
// input/output normalization is stored with the network (identity by
// default) so callers always work in physical units.
class Mlp {
 public:
  // Zero-initialized weights.
  Mlp(int in_dim, int hidden_dim, int out_dim);
  // Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.
  // Fill order: W1 row-major, then W2 row-major.
  Mlp(int in_dim, int hidden_dim, int out_dim, Rng& rng);

  int in_dim() const { return static_cast<int>(W1.cols()); }
  int hidden_dim() const { return static_cast<int>(W1.rows()); }
  int out_dim() const { return static_cast<int>(W2.rows()); }

  // y = denorm(W2 * sigmoid(W1 * norm(x) + b1) + b2)
  Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& X,
                                ExecPolicy policy = ExecPolicy::kParallel) const;

  // One SGD step on mean-squared error over the batch, computed in
  // normalized output space (equal to physical units when normalization is
  // identity). Returns the loss from BEFORE the weight update. Throws
  // TrainingDivergedError if that loss is not finite (weights untouched).
  double train_step(const TrainBatch& batch, double lr,
                    ExecPolicy policy = ExecPolicy::kParallel);

  // Analytic d(forward)/dx at x, in physical units (normalization chain
  // included): out_dim x in_dim.
  Eigen::MatrixXd input_jacobian(const Eigen::VectorXd& x) const;

  void set_normalization(const Eigen::VectorXd& in_mean,
                         const Eigen::VectorXd& in_scale,
                         const Eigen::VectorXd& out_mean,
                         const Eigen::VectorXd& out_scale);
  // Per-dimension mean/std of the given data, std floored at `min_scale`.
  void fit_normalization(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                         double min_scale = 1e-6);

  // Binary format, round-trips bit-exactly. The stream overloads let other
  // containers embed a network in their own files.
  void save(const std::string& path) const;
  static Mlp load(const std::string& path);
  void save(std::ostream& out) const;
  static Mlp load(std::istream& in, const std::string& context);

  bool operator==(const Mlp& o) const;

  Eigen::MatrixXd W1, W2;  // hidden x in, out x hidden
  Eigen::VectorXd b1, b2;
  Eigen::VectorXd in_mean, in_scale, out_mean, out_scale;

 private:
  void check_input_dim(Eigen::Index rows) const;
};

}  // namespace tdsim
