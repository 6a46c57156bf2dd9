#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <string>
#include <vector>

namespace tdsim {

// Revolute joint: frame = parent * Translate(offset) * Rotate(axis, theta).
struct Joint {
  std::string name;
  Eigen::Vector3d axis;    // unit, in this joint's pre-rotation frame
  Eigen::Vector3d offset;  // mm, in parent frame
  double lo = 0.0, hi = 0.0;  // rad
};

struct Chain {
  std::vector<Joint> joints;
  Eigen::Vector3d ee_offset = Eigen::Vector3d::Zero();  // mm, in ee link frame
  int ee_link = -1;  // link carrying the end effector; -1 = last link

  int n_joints() const { return static_cast<int>(joints.size()); }
  int resolved_ee_link() const { return ee_link < 0 ? n_joints() : ee_link; }
};

// One muscle attachment point. Link 0 is the fixed base; link i (1-based)
// is the body distal to joint i-1.
struct RoutePoint {
  int link = 0;
  Eigen::Vector3d pos = Eigen::Vector3d::Zero();  // mm, in link frame
};

// Straight-line route: start point, optional relay points, end point.
struct MuscleRoute {
  int id = 0;
  std::vector<RoutePoint> points;
};

struct GeometricModel {
  Chain chain;
  std::vector<MuscleRoute> routes;

  int n_joints() const { return chain.n_joints(); }
  int n_muscles() const { return static_cast<int>(routes.size()); }

  // Structural checks (unit axes, limit ordering, route shape, link
  // indices). Throws ConfigError on violation.
  void validate() const;
};

// World transforms of links 0..n (n_joints + 1 entries, element 0 = identity).
std::vector<Eigen::Isometry3d> link_frames(const Chain& chain,
                                           const Eigen::VectorXd& theta);

bool within_limits(const Chain& chain, const Eigen::VectorXd& theta);
Eigen::VectorXd clamp_to_limits(const Chain& chain,
                                const Eigen::VectorXd& theta);

// End-effector world position (mm). Optionally returns the link frames.
Eigen::Vector3d forward_kinematics(const GeometricModel& model,
                                   const Eigen::VectorXd& theta,
                                   std::vector<Eigen::Isometry3d>* frames = nullptr);

// Per-muscle path length: sum of segment lengths between consecutive
// attachment points in world frame (mm).
Eigen::VectorXd muscle_lengths_abs(const GeometricModel& model,
                                   const Eigen::VectorXd& theta);

// Length change from the zero posture: abs(theta) - abs(0) (mm).
Eigen::VectorXd muscle_lengths_rel(const GeometricModel& model,
                                   const Eigen::VectorXd& theta);

// d(ee position)/d(theta), 3 x n_joints (mm/rad), axis-cross-moment-arm
// construction.
Eigen::MatrixXd joint_jacobian(const GeometricModel& model,
                               const Eigen::VectorXd& theta);

// d(muscle_lengths_rel)/d(theta), n_muscles x n_joints (mm/rad), central
// finite differences with eps = 1e-5 rad.
Eigen::MatrixXd muscle_jacobian_geo(const GeometricModel& model,
                                    const Eigen::VectorXd& theta);

// Same matrix computed analytically (unit-vector projection of per-point
// velocities); used where the finite-difference version is too slow.
Eigen::MatrixXd muscle_jacobian_analytic(const GeometricModel& model,
                                         const Eigen::VectorXd& theta);

// Parse a model definition file. Malformed input throws ConfigError with
// path:line. With require_full_arm the file must define exactly 5 joints,
// 10 muscles, and at least one route crossing 2 or more joints.
GeometricModel load_model(const std::string& path, bool require_full_arm = true);

}  // namespace tdsim
