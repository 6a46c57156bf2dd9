#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "tdsim/kinematics.hpp"
#include "tdsim/mlp.hpp"
#include "tdsim/plant.hpp"

namespace tdsim {

struct JointEstimate {
  Eigen::VectorXd theta;
  bool stalled = false;   // residual stopped decreasing before convergence
  int iterations = 0;
  double residual = 0.0;  // final ||l_m - predict|| (mm)
};

// Learned muscle-length model l = f_ideal(theta) + g(theta, T): an ideal
// joint-muscle mapping network plus a tension-dependent correction network.
// Also carries the joint/tension ranges it was trained over.
class SelfBodyImage {
 public:
  SelfBodyImage(int n_joints, int n_muscles, int hidden_dim);

  int n_joints() const { return ijmm.in_dim(); }
  int n_muscles() const { return ijmm.out_dim(); }

  Eigen::VectorXd ideal_lengths(const Eigen::VectorXd& theta) const;  // f_ideal
  Eigen::VectorXd compensation(const Eigen::VectorXd& theta,
                               const Eigen::VectorXd& T) const;  // g
  Eigen::VectorXd predict_lengths(const Eigen::VectorXd& theta,
                                  const Eigen::VectorXd& T) const;

  // d(f_ideal)/d(theta): the learned muscle Jacobian G (mm/rad).
  Eigen::MatrixXd muscle_jacobian(const Eigen::VectorXd& theta) const;

  // d(predict_lengths)/d(theta) at fixed T: adds the correction network's
  // angle sensitivity; used by the joint estimator.
  Eigen::MatrixXd predict_jacobian_theta(const Eigen::VectorXd& theta,
                                         const Eigen::VectorXd& T) const;

  // Per-muscle stiffness from the correction network: least-squares slope of
  // g_i over a +-10 N window (9 points) around T_i, K_m[i,i] = -1/slope.
  // Slopes flatter than s_min clamp to the K_cap ceiling.
  Eigen::MatrixXd muscle_stiffness(const Eigen::VectorXd& theta,
                                   const Eigen::VectorXd& T) const;

  // Damped Gauss-Newton inversion of predict_lengths in theta, clamped to
  // the stored joint limits. Stops when the step drops below 1e-4 rad or at
  // 50 iterations; flags a stall after 5 non-improving iterations.
  JointEstimate estimate_joints(const Eigen::VectorXd& l_m,
                                const Eigen::VectorXd& T_m,
                                const Eigen::VectorXd& theta_init) const;

  void save(const std::string& path) const;
  static SelfBodyImage load(const std::string& path);

  Mlp ijmm;  // theta (n) -> l (m)
  Mlp mrcm;  // [theta; T] (n+m) -> delta l (m)
  Eigen::VectorXd theta_lo, theta_hi;  // rad
  double T_max = 200.0;                // N, trained tension range

  static constexpr double kStiffnessWindow = 10.0;  // N each side
  static constexpr int kStiffnessPoints = 9;
  static constexpr double kSlopeMin = 1e-3;   // mm/N
  static constexpr double kStiffnessCap = 1000.0;  // N/mm

 private:
  Eigen::VectorXd stack_input(const Eigen::VectorXd& theta,
                              const Eigen::VectorXd& T) const;
};

struct InitialTrainParams {
  int hidden_dim = 128;
  int n_samples = 20000;
  double T_max = 200.0;  // MRCM tension range (N)
  // Plain SGD stalls on a ~10 mm plateau below lr ~ 0.05 for this map; 0.1
  // clears it and reaches < 1 mm validation RMSE within the epoch cap.
  double lr = 0.1;
  int batch_size = 64;
  int max_epochs = 300;
  int plateau_epochs = 20;     // stop when val MSE stops improving this long
  double val_fraction = 0.1;
  double fail_rmse_mm = 2.0;   // above this at the epoch cap -> error
  double anchor_fraction = 0.02;  // extra (0,0) / (theta,0,0) pins
  ExecPolicy policy = ExecPolicy::kParallel;
};

// Pre-train both networks from the nominal geometry: the ideal mapping on
// (theta, geometric relative lengths) and the correction on
// (theta, T, -elongation). Deterministic for a given seed. Throws
// InitialTrainingFailedError if validation RMSE stays above fail_rmse_mm.
SelfBodyImage initial_train(const GeometricModel& nominal,
                            const std::vector<ElasticityParams>& elasticity,
                            int n_samples, uint64_t seed,
                            const InitialTrainParams& opts = {});

}  // namespace tdsim
