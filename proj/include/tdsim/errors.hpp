#pragma once

#include <stdexcept>
#include <string>

#include "tdsim/types.hpp"

namespace tdsim {

// Malformed config/model file. what() carries "path:line: message".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& path, int line, const std::string& msg)
      : std::runtime_error(path + ":" + std::to_string(line) + ": " + msg),
        path_(path),
        line_(line) {}
  explicit ConfigError(const std::string& msg)
      : std::runtime_error(msg), line_(0) {}
  const std::string& path() const { return path_; }
  int line() const { return line_; }

 private:
  std::string path_;
  int line_;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InitialTrainingFailedError : public std::runtime_error {
 public:
  InitialTrainingFailedError(const std::string& msg, double val_rmse_mm)
      : std::runtime_error(msg), val_rmse_mm(val_rmse_mm) {}
  double val_rmse_mm;
};

class SimulationDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SingularPostureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidTargetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Requested joint torque is outside the feasible cone of tendon tensions.
// Carries the closest torque the distributor could realize.
class InfeasibleTorqueError : public std::runtime_error {
 public:
  InfeasibleTorqueError(const std::string& msg, const Eigen::VectorXd& best,
                        double residual)
      : std::runtime_error(msg), best_torque(best), residual(residual) {}
  Eigen::VectorXd best_torque;
  double residual;
};

class LearnerHaltedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tdsim
