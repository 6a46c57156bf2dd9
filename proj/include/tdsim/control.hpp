#pragma once

#include <Eigen/Dense>
#include <vector>

#include "tdsim/body_image.hpp"
#include "tdsim/kinematics.hpp"
#include "tdsim/rng.hpp"

namespace tdsim {

struct StiffnessControlGains {
  Eigen::VectorXd T_bias;   // N, per muscle (keeps tendons taut)
  double K_stiff = 2.0;     // N/mm

  static StiffnessControlGains defaults(int n_muscles, double bias = 10.0,
                                        double k = 2.0) {
    return {Eigen::VectorXd::Constant(n_muscles, bias), k};
  }
};

// One-sided spring law: T_target = T_bias + max(0, K_stiff*(l_m - l_target)).
Eigen::VectorXd muscle_stiffness_command(const Eigen::VectorXd& l_m,
                                         const Eigen::VectorXd& l_target,
                                         const StiffnessControlGains& g);

// Muscle-length targets for a joint target: the image's predicted lengths at
// the reference tensions plus the control-law offset
// l_soft = -(T_ref - T_bias)/K_stiff. Stage 1 passes T_ref = T_bias; stage 2
// passes the tensions measured after stage-1 settling, exactly once.
Eigen::VectorXd position_targets(const SelfBodyImage& image,
                                 const Eigen::VectorXd& theta_target,
                                 const Eigen::VectorXd& T_ref,
                                 const StiffnessControlGains& g);

// tau = -G^T * T (N*mm).
Eigen::VectorXd joint_torque(const Eigen::MatrixXd& G, const Eigen::VectorXd& T);

// Minimum-norm-above-bias tension distribution: argmin ||T - T_bias||^2
// subject to -G(theta)^T T = tau_des and T >= T_bias, by alternating
// projections (200 iterations, 1 N*mm tolerance). Throws
// InfeasibleTorqueError carrying the closest achievable torque when the
// demand is outside the feasible cone.
Eigen::VectorXd torque_command(const SelfBodyImage& image,
                               const Eigen::VectorXd& theta,
                               const Eigen::VectorXd& tau_des,
                               const StiffnessControlGains& g);

struct OperationalStiffness {
  Eigen::Matrix3d K_w;     // N/mm, task space, symmetrized
  Eigen::VectorXd theta;   // posture it was computed at
};

// K_w = J^{+T} (G^T K_m G) J^{+} with Moore-Penrose pseudoinverses (J is
// 3 x n for a redundant arm). Throws SingularPostureError if rank(J) < 3.
OperationalStiffness operational_stiffness(const Eigen::MatrixXd& J,
                                           const Eigen::MatrixXd& G,
                                           const Eigen::MatrixXd& K_m,
                                           const Eigen::VectorXd& theta);

// E = ||K_target^{-1} K_w(theta,T) - I||_F + alpha*||tau(T_current) - tau(T)||
// with the torque difference taken in N*m so alpha stays a small
// dimensionless weight. J comes from the nominal geometry, G and K_m from
// the image. Throws InvalidTargetError if K_target is singular.
double stiffness_objective(const Eigen::VectorXd& theta,
                           const Eigen::VectorXd& T,
                           const Eigen::VectorXd& T_current,
                           const Eigen::Matrix3d& K_target,
                           const SelfBodyImage& image,
                           const GeometricModel& nominal, double alpha);

struct StiffnessSearchParams {
  double alpha = 0.02;
  int N_v1 = 10;          // candidates per round
  int N_v2 = 2;           // best candidates averaged into the step
  int N_v3 = 50;          // rounds
  double rand_range = 20.0;  // N, uniform candidate offsets
  double T_lim = 200.0;      // N, upper clamp for candidates
};

struct StiffnessSearchResult {
  Eigen::VectorXd T;                // final tensions
  double E_initial = 0.0;
  double E_final = 0.0;
  std::vector<double> accepted_E;   // E after each accepted step
};

// Stochastic hill climb over muscle tensions: each round draws N_v1 random
// offsets, averages the best N_v2 into a trial step, and accepts it only if
// the objective decreases. Candidates clamp to [T_bias, T_lim]. Candidate
// evaluation is independent per slot, so it can run under OpenMP without
// changing results.
StiffnessSearchResult search_tensions(const SelfBodyImage& image,
                                      const GeometricModel& nominal,
                                      const Eigen::VectorXd& theta_target,
                                      const Eigen::Matrix3d& K_target,
                                      const Eigen::VectorXd& T_current,
                                      const StiffnessControlGains& g,
                                      const StiffnessSearchParams& p,
                                      uint64_t seed,
                                      ExecPolicy policy = ExecPolicy::kParallel);

struct SafetyParams {
  double K_T = 1.0;       // mm/N
  double K_C = 1.0;       // mm/degC
  double T_lim = 200.0;   // N
  double C_lim = 60.0;    // degC
  double dl_lim = 0.01;   // mm per control tick
  double C_burn = 90.0;   // degC, the failure line the mechanism must avoid
  Eigen::VectorXd delta_l;  // accumulated target-length relaxation (mm)
};

// Rate-limited relaxation toward
// dl_ideal = K_T*max(T - T_lim, 0) + K_C*max(C - C_lim, 0), at most dl_lim
// per call. Call once per control tick; the caller adds the returned offsets
// to the muscle-length targets (lengthening sheds tension).
Eigen::VectorXd safety_adjust(SafetyParams& s, const Eigen::VectorXd& T_m,
                              const Eigen::VectorXd& C);

}  // namespace tdsim
