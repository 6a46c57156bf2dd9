#pragma once

#include <Eigen/Dense>
#include <array>
#include <string_view>

namespace tdsim {

inline constexpr int kNumJoints = 5;
inline constexpr int kNumMuscles = 10;

// Joint order is fixed everywhere: shoulder roll/pitch/yaw, elbow pitch/yaw.
using JointVector = Eigen::Matrix<double, kNumJoints, 1>;

// One entry per muscle #1..#10. Reused for lengths (mm), tensions (N),
// temperatures (degC).
using MuscleVector = Eigen::Matrix<double, kNumMuscles, 1>;

using JointSpaceJacobian = Eigen::Matrix<double, 3, kNumJoints>;        // mm/rad
using MuscleJacobian = Eigen::Matrix<double, kNumMuscles, kNumJoints>;  // mm/rad

inline constexpr std::array<std::string_view, kNumJoints> kJointNames = {
    "S_r", "S_p", "S_y", "E_p", "E_y"};

inline int joint_index(std::string_view name) {
  for (int i = 0; i < kNumJoints; ++i)
    if (kJointNames[i] == name) return i;
  return -1;
}

}  // namespace tdsim
