#include "tdsim/control.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tdsim/errors.hpp"

namespace tdsim {

Eigen::VectorXd muscle_stiffness_command(const Eigen::VectorXd& l_m,
                                         const Eigen::VectorXd& l_target,
                                         const StiffnessControlGains& g) {
  return g.T_bias.array() +
         (g.K_stiff * (l_m - l_target).array()).max(0.0);
}

Eigen::VectorXd position_targets(const SelfBodyImage& image,
                                 const Eigen::VectorXd& theta_target,
                                 const Eigen::VectorXd& T_ref,
                                 const StiffnessControlGains& g) {
  Eigen::VectorXd l_soft = -(T_ref - g.T_bias) / g.K_stiff;
  return image.predict_lengths(theta_target, T_ref) + l_soft;
}

Eigen::VectorXd joint_torque(const Eigen::MatrixXd& G,
                             const Eigen::VectorXd& T) {
  if (G.rows() != T.size())
    throw ShapeError("joint_torque: G rows != tension count");
  return -G.transpose() * T;
}

Eigen::VectorXd torque_command(const SelfBodyImage& image,
                               const Eigen::VectorXd& theta,
                               const Eigen::VectorXd& tau_des,
                               const StiffnessControlGains& g) {
  constexpr int kMaxIters = 200;
  constexpr double kTol = 1.0;  // N*mm

  Eigen::MatrixXd G = image.muscle_jacobian(theta);
  Eigen::MatrixXd A = -G.transpose();          // n x m
  Eigen::VectorXd c = tau_des - A * g.T_bias;  // demand above the bias level

  // Alternating projections (Dykstra) between the affine set {A u = c} and
  // the nonnegative orthant, from u = 0: converges to the minimum-norm
  // feasible u, i.e. minimum ||T - T_bias||.
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(A);
  Eigen::VectorXd u = Eigen::VectorXd::Zero(A.cols());
  Eigen::VectorXd q = Eigen::VectorXd::Zero(A.cols());
  for (int it = 0; it < kMaxIters; ++it) {
    Eigen::VectorXd y = u + cod.solve(c - A * u);  // onto the affine set
    Eigen::VectorXd u_next = (y + q).cwiseMax(0.0);
    q = y + q - u_next;
    u = u_next;
    if ((A * u - c).norm() < 0.5 * kTol) break;
  }

  double residual = (A * u - c).norm();
  Eigen::VectorXd T = g.T_bias + u;
  if (residual > 0.05 * tau_des.norm() + 10.0)
    throw InfeasibleTorqueError(
        "torque demand outside the feasible tension cone (residual " +
            std::to_string(residual) + " N*mm)",
        A * u + A * g.T_bias, residual);
  return T;
}

OperationalStiffness operational_stiffness(const Eigen::MatrixXd& J,
                                           const Eigen::MatrixXd& G,
                                           const Eigen::MatrixXd& K_m,
                                           const Eigen::VectorXd& theta) {
  if (J.rows() != 3 || J.cols() != G.cols())
    throw ShapeError("operational_stiffness: J must be 3 x n_joints");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(
      J, Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(1e-8);
  if (svd.rank() < 3)
    throw SingularPostureError(
        "joint Jacobian is rank deficient at this posture");
  // Moore-Penrose pseudoinverse from the SVD.
  Eigen::VectorXd inv_sv = svd.singularValues().cwiseInverse();
  Eigen::MatrixXd J_pinv =
      svd.matrixV() * inv_sv.asDiagonal() * svd.matrixU().transpose();

  Eigen::MatrixXd K_joint = G.transpose() * K_m * G;
  Eigen::Matrix3d K_w = J_pinv.transpose() * K_joint * J_pinv;
  OperationalStiffness out;
  out.K_w = 0.5 * (K_w + K_w.transpose());
  out.theta = theta;
  return out;
}

double stiffness_objective(const Eigen::VectorXd& theta,
                           const Eigen::VectorXd& T,
                           const Eigen::VectorXd& T_current,
                           const Eigen::Matrix3d& K_target,
                           const SelfBodyImage& image,
                           const GeometricModel& nominal, double alpha) {
  Eigen::FullPivLU<Eigen::Matrix3d> lu(K_target);
  if (!lu.isInvertible())
    throw InvalidTargetError("target stiffness matrix is singular");
  Eigen::MatrixXd J = joint_jacobian(nominal, theta);
  Eigen::MatrixXd G = image.muscle_jacobian(theta);
  Eigen::MatrixXd K_m = image.muscle_stiffness(theta, T);
  Eigen::Matrix3d K_w = operational_stiffness(J, G, K_m, theta).K_w;

  double stiffness_term =
      (lu.inverse() * K_w - Eigen::Matrix3d::Identity()).norm();
  // Torque difference in N*m; in N*mm the penalty would drown the
  // stiffness term at alpha = 0.02.
  double torque_term =
      (joint_torque(G, T_current) - joint_torque(G, T)).norm() / 1000.0;
  return stiffness_term + alpha * torque_term;
}

StiffnessSearchResult search_tensions(const SelfBodyImage& image,
                                      const GeometricModel& nominal,
                                      const Eigen::VectorXd& theta_target,
                                      const Eigen::Matrix3d& K_target,
                                      const Eigen::VectorXd& T_current,
                                      const StiffnessControlGains& g,
                                      const StiffnessSearchParams& p,
                                      uint64_t seed, ExecPolicy policy) {
  Eigen::FullPivLU<Eigen::Matrix3d> lu(K_target);
  if (!lu.isInvertible())
    throw InvalidTargetError("target stiffness matrix is singular");

  const int m = static_cast<int>(T_current.size());
  Rng rng(derive_seed(seed, 0x73746966ULL));

  // G and J are fixed over the search (theta_target is fixed); only the
  // muscle stiffness depends on the candidate tensions.
  Eigen::MatrixXd J = joint_jacobian(nominal, theta_target);
  Eigen::MatrixXd G = image.muscle_jacobian(theta_target);
  Eigen::Matrix3d K_target_inv = lu.inverse();

  auto eval = [&](const Eigen::VectorXd& T, const Eigen::VectorXd& T_ref) {
    Eigen::MatrixXd K_m = image.muscle_stiffness(theta_target, T);
    Eigen::Matrix3d K_w = operational_stiffness(J, G, K_m, theta_target).K_w;
    double stiffness_term =
        (K_target_inv * K_w - Eigen::Matrix3d::Identity()).norm();
    double torque_term = (G.transpose() * (T_ref - T)).norm() / 1000.0;
    return stiffness_term + p.alpha * torque_term;
  };
  auto clamp = [&](Eigen::VectorXd T) {
    for (int i = 0; i < m; ++i)
      T(i) = std::min(std::max(T(i), g.T_bias(i)), p.T_lim);
    return T;
  };

  StiffnessSearchResult res;
  Eigen::VectorXd T_cur = clamp(T_current);
  double E_cur = eval(T_cur, T_current);
  res.E_initial = E_cur;

  std::vector<Eigen::VectorXd> offsets(static_cast<size_t>(p.N_v1));
  std::vector<Eigen::VectorXd> cands(static_cast<size_t>(p.N_v1));
  std::vector<double> E_cand(static_cast<size_t>(p.N_v1));
  const bool par = policy == ExecPolicy::kParallel;

  for (int round = 0; round < p.N_v3; ++round) {
    // Draw all offsets serially so the random stream is thread-independent.
    for (int v = 0; v < p.N_v1; ++v) {
      Eigen::VectorXd r(m);
      for (int i = 0; i < m; ++i)
        r(i) = rng.uniform(-p.rand_range, p.rand_range);
      offsets[static_cast<size_t>(v)] = r;
      cands[static_cast<size_t>(v)] = clamp(T_cur + r);
    }
#pragma omp parallel for schedule(static) if (par)
    for (int v = 0; v < p.N_v1; ++v)
      E_cand[static_cast<size_t>(v)] =
          eval(cands[static_cast<size_t>(v)], T_current);

    std::vector<int> order(static_cast<size_t>(p.N_v1));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return E_cand[static_cast<size_t>(a)] < E_cand[static_cast<size_t>(b)];
    });

    Eigen::VectorXd step = Eigen::VectorXd::Zero(m);
    for (int k = 0; k < p.N_v2; ++k)
      step += offsets[static_cast<size_t>(order[static_cast<size_t>(k)])];
    step /= p.N_v2;

    Eigen::VectorXd T_try = clamp(T_cur + step);
    double E_try = eval(T_try, T_current);
    if (E_try < E_cur) {
      T_cur = T_try;
      E_cur = E_try;
      res.accepted_E.push_back(E_cur);
    }
  }
  res.T = T_cur;
  res.E_final = E_cur;
  return res;
}

Eigen::VectorXd safety_adjust(SafetyParams& s, const Eigen::VectorXd& T_m,
                              const Eigen::VectorXd& C) {
  if (s.delta_l.size() == 0) s.delta_l = Eigen::VectorXd::Zero(T_m.size());
  Eigen::VectorXd ideal =
      s.K_T * (T_m.array() - s.T_lim).max(0.0) +
      s.K_C * (C.array() - s.C_lim).max(0.0);
  Eigen::VectorXd delta = ideal - s.delta_l;
  for (int i = 0; i < delta.size(); ++i)
    delta(i) = std::clamp(delta(i), -s.dl_lim, s.dl_lim);
  s.delta_l += delta;
  return s.delta_l;
}

}  // namespace tdsim
