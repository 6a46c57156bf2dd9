#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "tdsim/kinematics.hpp"
#include "tdsim/rng.hpp"

namespace tdsim {

// Nonlinear tendon elongation L_e(l_abs, T) = (l_abs/L0) * a * (1 - e^(-bT)).
struct ElasticityParams {
  double a = 6.0;    // saturation elongation per reference length (mm)
  double b = 0.02;   // tension constant (1/N)
  double L0 = 1.0;   // reference absolute length (mm)
};

double elongation(const ElasticityParams& p, double l_abs, double T);

struct PlantParams {
  uint64_t perturb_seed = 1;       // fixes the "true robot" build
  double perturb_mm = 8.0;         // attachment-point jitter, uniform +-
  double elast_perturb_frac = 0.2; // true a, b off nominal by this fraction
  double a = 3.9;                  // nominal elongation constants
  double b = 0.02;
  double k_lin = 15.0;    // tendon-series stiffness (N/mm)
  double v_max = 40.0;    // motor speed limit (mm/s)
  double k_servo = 5.0;   // servo speed per tension error (mm/s/N)
  double inertia = 400.0;   // diagonal joint inertia (N*mm*s^2/rad)
  double damping = 2900.0;  // diagonal joint damping (N*mm*s/rad)
  double k_heat = 2.8125e-5;  // degC per N^2 per s
  double k_cool = 0.025;      // 1/s
  double c_amb = 25.0;        // degC
  double noise_theta = 0.0;  // sensor noise std (rad, mm, N); 0 = off
  double noise_l = 0.0;
  double noise_T = 0.0;
  double hysteresis_mm = 0.0;  // backlash band on the true path length
  double payload_kg = 0.0;     // point mass at the end effector
};

// One sensor sweep. Immutable snapshot; safe to hand across contexts.
struct SensorFrame {
  Eigen::VectorXd theta;  // potentiometers (rad)
  Eigen::VectorXd l;      // motor-encoder relative lengths (mm)
  Eigen::VectorXd T;      // loadcells (N)
  Eigen::VectorXd C;      // motor temperatures (degC)
  double t = 0.0;         // s
};

// Simulated robot with a perturbed copy of the nominal geometry and its own
// (unknown to the controller) elasticity. Quasi-static joint dynamics, rate
// limited tension servo per muscle, first-order thermal model.
class Plant {
 public:
  // noise_seed drives sensor noise only; the true-robot perturbation is
  // fixed by params.perturb_seed so runs share one robot across seeds.
  Plant(const GeometricModel& nominal, const PlantParams& params,
        uint64_t noise_seed = 0);

  // Advance one substep of `dt` seconds (0 < dt <= 0.01) toward T_target,
  // with external force F_ext (N) applied at the end effector.
  SensorFrame step(const Eigen::VectorXd& T_target,
                   const Eigen::Vector3d& F_ext, double dt);

  void rupture(int muscle);
  bool is_ruptured(int muscle) const { return ruptured_[static_cast<size_t>(muscle)]; }

  // Probe mode: servo holds motor positions regardless of T_target, so an
  // external force meets the pure hardware stiffness.
  void set_motor_freeze(bool freeze) { motors_frozen_ = freeze; }
  void set_payload(double kg) { params_.payload_kg = kg; }

  // Equilibrium tension of one muscle at the current posture and motor
  // position: the unique T >= 0 with T = k_lin * max(r - L_e(T) - p, 0),
  // bisected to 1e-6 N.
  double solve_tension(int muscle) const;

  SensorFrame sensors() const;

  const GeometricModel& true_model() const { return true_model_; }
  const PlantParams& params() const { return params_; }
  const Eigen::VectorXd& theta() const { return theta_; }
  const Eigen::VectorXd& theta_dot() const { return theta_dot_; }
  const Eigen::VectorXd& motor_pos() const { return motor_pos_; }
  const Eigen::VectorXd& tensions() const { return tensions_; }
  const Eigen::VectorXd& temperatures() const { return temps_; }
  const std::vector<ElasticityParams>& true_elasticity() const {
    return elasticity_;
  }
  Eigen::Vector3d ee_position() const;
  double time() const { return t_; }

  int n_joints() const { return true_model_.n_joints(); }
  int n_muscles() const { return true_model_.n_muscles(); }

 private:
  double path_length_rel(int muscle) const;
  void refresh_kinematics();  // frames, true lengths, hysteresis band
  double solve_tension_at(int muscle, double r_eff) const;

  GeometricModel true_model_;
  PlantParams params_;
  std::vector<ElasticityParams> elasticity_;  // true constants per muscle
  Eigen::VectorXd L0_;                        // true absolute lengths at zero

  Eigen::VectorXd theta_, theta_dot_;
  Eigen::VectorXd motor_pos_;   // relative paid-out length p (mm)
  Eigen::VectorXd tensions_;    // last solved T (N)
  Eigen::VectorXd temps_;       // degC
  Eigen::VectorXd r_true_;      // current true relative path lengths (mm)
  Eigen::VectorXd r_eff_;       // hysteresis-filtered path lengths (mm)
  Eigen::VectorXd l_abs_;       // current true absolute lengths (mm)
  std::vector<bool> ruptured_;
  bool motors_frozen_ = false;
  double t_ = 0.0;
  mutable Rng noise_rng_;
};

// Plant config file: [plant] section with the PlantParams keys plus
// model = <path> (resolved relative to the config file). Also checks the
// tension fixed point stays contractive over the joint range.
struct PlantSetup {
  GeometricModel nominal;
  PlantParams params;
};
PlantSetup load_plant_config(const std::string& path);

// Applies the seeded attachment jitter / elasticity offsets that the Plant
// constructor uses; exposed for tests that need the true model directly.
GeometricModel perturb_model(const GeometricModel& nominal, double jitter_mm,
                             uint64_t seed);

// The elasticity constants the controller believes in: nominal a, b with
// per-muscle reference lengths from the nominal geometry at zero posture.
std::vector<ElasticityParams> nominal_elasticity(const GeometricModel& nominal,
                                                 const PlantParams& params);

}  // namespace tdsim
