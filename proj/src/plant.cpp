#include "tdsim/plant.hpp"

#include <cmath>
#include <filesystem>

#include "tdsim/config.hpp"
#include "tdsim/errors.hpp"

namespace tdsim {

double elongation(const ElasticityParams& p, double l_abs, double T) {
  return (l_abs / p.L0) * p.a * (1.0 - std::exp(-p.b * T));
}

GeometricModel perturb_model(const GeometricModel& nominal, double jitter_mm,
                             uint64_t seed) {
  GeometricModel out = nominal;
  Rng rng(derive_seed(seed, 0x7275626f74ULL));
  for (MuscleRoute& route : out.routes)
    for (RoutePoint& p : route.points)
      for (int k = 0; k < 3; ++k)
        p.pos(k) += rng.uniform(-jitter_mm, jitter_mm);
  return out;
}

Plant::Plant(const GeometricModel& nominal, const PlantParams& params,
             uint64_t noise_seed)
    : true_model_(perturb_model(nominal, params.perturb_mm, params.perturb_seed)),
      params_(params),
      noise_rng_(derive_seed(noise_seed, 0x73656e736fULL)) {
  const int n = true_model_.n_joints();
  const int m = true_model_.n_muscles();
  if (params_.k_lin <= 0 || params_.v_max <= 0 || params_.inertia <= 0 ||
      params_.damping < 0 || params_.k_cool < 0)
    throw ConfigError("plant: k_lin, v_max, inertia must be positive");

  // True elasticity is 20% (elast_perturb_frac) below the nominal constants;
  // the controller's pre-trained image only knows the nominal ones.
  L0_ = muscle_lengths_abs(true_model_, Eigen::VectorXd::Zero(n));
  elasticity_.resize(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    ElasticityParams e;
    e.a = params_.a * (1.0 - params_.elast_perturb_frac);
    e.b = params_.b * (1.0 - params_.elast_perturb_frac);
    e.L0 = L0_(i);
    if (e.L0 <= 0)
      throw ConfigError("plant: muscle " + std::to_string(i + 1) +
                        " has non-positive rest length");
    elasticity_[static_cast<size_t>(i)] = e;
  }

  // The tension fixed point T = k*max(r - L_e(T) - p, 0) must stay
  // contractive: k_lin * a * b * (l_abs/L0) < 1 everywhere the arm can go.
  {
    Rng grid(0xC0FFEE);
    Eigen::VectorXd ratio_max = Eigen::VectorXd::Ones(m);
    for (int s = 0; s < 200; ++s) {
      Eigen::VectorXd th(n);
      for (int j = 0; j < n; ++j) {
        const Joint& jt = true_model_.chain.joints[static_cast<size_t>(j)];
        th(j) = grid.uniform(jt.lo, jt.hi);
      }
      Eigen::VectorXd labs = muscle_lengths_abs(true_model_, th);
      for (int i = 0; i < m; ++i)
        ratio_max(i) = std::max(ratio_max(i), labs(i) / L0_(i));
    }
    for (int i = 0; i < m; ++i) {
      const ElasticityParams& e = elasticity_[static_cast<size_t>(i)];
      double kappa = params_.k_lin * e.a * e.b * ratio_max(i);
      if (kappa >= 1.0)
        throw ConfigError(
            "plant: tension fixed point not contractive for muscle " +
            std::to_string(i + 1) + " (k_lin*a*b*l_abs/L0 = " +
            std::to_string(kappa) + " >= 1); reduce k_lin, a, or b");
    }
  }

  theta_ = Eigen::VectorXd::Zero(n);
  theta_dot_ = Eigen::VectorXd::Zero(n);
  motor_pos_ = Eigen::VectorXd::Zero(m);
  tensions_ = Eigen::VectorXd::Zero(m);
  temps_ = Eigen::VectorXd::Constant(m, params_.c_amb);
  ruptured_.assign(static_cast<size_t>(m), false);
  refresh_kinematics();
  for (int i = 0; i < m; ++i) tensions_(i) = solve_tension(i);
}

void Plant::refresh_kinematics() {
  l_abs_ = muscle_lengths_abs(true_model_, theta_);
  r_true_ = l_abs_ - L0_;
  if (r_eff_.size() == 0) r_eff_ = r_true_;
  const double half = params_.hysteresis_mm * 0.5;
  for (int i = 0; i < r_true_.size(); ++i) {
    if (r_true_(i) > r_eff_(i) + half) r_eff_(i) = r_true_(i) - half;
    else if (r_true_(i) < r_eff_(i) - half) r_eff_(i) = r_true_(i) + half;
  }
}

double Plant::solve_tension_at(int muscle, double r_eff) const {
  if (ruptured_[static_cast<size_t>(muscle)]) return 0.0;
  const double k = params_.k_lin;
  const double p = motor_pos_(muscle);
  const ElasticityParams& e = elasticity_[static_cast<size_t>(muscle)];
  const double l_abs = l_abs_(muscle);

  double hi = k * (r_eff - p);  // L_e >= 0, so T <= k*(r - p)
  if (hi <= 0.0) return 0.0;    // slack
  double lo = 0.0;
  // f(T) = k*max(r - L_e(T) - p, 0) - T is strictly decreasing, f(lo) >= 0,
  // f(hi) <= 0: bisect. Interval width 2e-7 keeps the fixed-point residual
  // of the returned midpoint below 1e-6 N (|f'| < 2 under the contraction
  // condition).
  while (hi - lo > 2e-7) {
    double mid = 0.5 * (lo + hi);
    double f = k * std::max(r_eff - elongation(e, l_abs, mid) - p, 0.0) - mid;
    if (f > 0.0) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

double Plant::solve_tension(int muscle) const {
  return solve_tension_at(muscle, r_eff_(muscle));
}

SensorFrame Plant::step(const Eigen::VectorXd& T_target,
                        const Eigen::Vector3d& F_ext, double dt) {
  const int n = n_joints();
  const int m = n_muscles();
  if (T_target.size() != m)
    throw ShapeError("plant: T_target size " + std::to_string(T_target.size()) +
                     ", expected " + std::to_string(m));
  if (!(dt > 0.0 && dt <= 0.01))
    throw SimulationDivergedError("plant: dt must be in (0, 0.01]");

  // 1. Tension servo: wind in to raise tension, pay out to lower it.
  if (!motors_frozen_) {
    for (int i = 0; i < m; ++i) {
      if (ruptured_[static_cast<size_t>(i)]) continue;
      double err = tensions_(i) - std::max(T_target(i), 0.0);
      double v = std::clamp(params_.k_servo * err, -params_.v_max, params_.v_max);
      motor_pos_(i) += v * dt;
    }
  }

  // 2. Re-solve tensions at the current posture.
  refresh_kinematics();
  for (int i = 0; i < m; ++i) tensions_(i) = solve_tension(i);

  // 3. Quasi-static joint dynamics.
  Eigen::MatrixXd G = muscle_jacobian_analytic(true_model_, theta_);
  Eigen::MatrixXd J = joint_jacobian(true_model_, theta_);
  Eigen::Vector3d F = F_ext;
  F.z() += -9.81 * params_.payload_kg;
  Eigen::VectorXd tau = -G.transpose() * tensions_ + J.transpose() * F;
  Eigen::VectorXd theta_ddot =
      (tau - params_.damping * theta_dot_) / params_.inertia;
  theta_dot_ += dt * theta_ddot;
  theta_ += dt * theta_dot_;

  // 4. Hard joint stops.
  for (int j = 0; j < n; ++j) {
    const Joint& jt = true_model_.chain.joints[static_cast<size_t>(j)];
    if (theta_(j) < jt.lo) {
      theta_(j) = jt.lo;
      theta_dot_(j) = 0.0;
    } else if (theta_(j) > jt.hi) {
      theta_(j) = jt.hi;
      theta_dot_(j) = 0.0;
    }
  }

  // 5. Thermal model.
  for (int i = 0; i < m; ++i) {
    temps_(i) += dt * (params_.k_heat * tensions_(i) * tensions_(i) -
                       params_.k_cool * (temps_(i) - params_.c_amb));
    temps_(i) = std::max(temps_(i), params_.c_amb);
  }

  if (!theta_.allFinite() || !theta_dot_.allFinite() || !tensions_.allFinite())
    throw SimulationDivergedError("plant: state diverged (dt too large?)");

  t_ += dt;
  return sensors();
}

SensorFrame Plant::sensors() const {
  SensorFrame f;
  f.theta = theta_;
  f.l = motor_pos_;
  f.T = tensions_;
  f.C = temps_;
  f.t = t_;
  if (params_.noise_theta > 0)
    for (int j = 0; j < f.theta.size(); ++j)
      f.theta(j) += noise_rng_.normal(0.0, params_.noise_theta);
  if (params_.noise_l > 0)
    for (int i = 0; i < f.l.size(); ++i)
      f.l(i) += noise_rng_.normal(0.0, params_.noise_l);
  if (params_.noise_T > 0)
    for (int i = 0; i < f.T.size(); ++i)
      f.T(i) += noise_rng_.normal(0.0, params_.noise_T);
  return f;
}

void Plant::rupture(int muscle) {
  ruptured_[static_cast<size_t>(muscle)] = true;
  tensions_(muscle) = 0.0;
}

Eigen::Vector3d Plant::ee_position() const {
  return forward_kinematics(true_model_, theta_);
}

std::vector<ElasticityParams> nominal_elasticity(const GeometricModel& nominal,
                                                 const PlantParams& params) {
  Eigen::VectorXd l0 =
      muscle_lengths_abs(nominal, Eigen::VectorXd::Zero(nominal.n_joints()));
  std::vector<ElasticityParams> out(static_cast<size_t>(nominal.n_muscles()));
  for (int i = 0; i < nominal.n_muscles(); ++i)
    out[static_cast<size_t>(i)] = ElasticityParams{params.a, params.b, l0(i)};
  return out;
}

PlantSetup load_plant_config(const std::string& path) {
  Config cfg = Config::load(path);
  PlantSetup setup;

  std::string model_rel = cfg.get_string("plant.model");
  std::filesystem::path model_path(model_rel);
  if (model_path.is_relative())
    model_path = std::filesystem::path(path).parent_path() / model_path;
  setup.nominal = load_model(model_path.string());

  PlantParams& p = setup.params;
  p.perturb_seed = static_cast<uint64_t>(cfg.get_int("plant.perturb_seed", 1));
  p.perturb_mm = cfg.get_double("plant.perturb_mm", p.perturb_mm);
  p.elast_perturb_frac =
      cfg.get_double("plant.elast_perturb_frac", p.elast_perturb_frac);
  p.a = cfg.get_double("plant.a", p.a);
  p.b = cfg.get_double("plant.b", p.b);
  p.k_lin = cfg.get_double("plant.k_lin", p.k_lin);
  p.v_max = cfg.get_double("plant.v_max", p.v_max);
  p.k_servo = cfg.get_double("plant.k_servo", p.k_servo);
  p.inertia = cfg.get_double("plant.inertia", p.inertia);
  p.damping = cfg.get_double("plant.damping", p.damping);
  p.k_heat = cfg.get_double("plant.k_heat", p.k_heat);
  p.k_cool = cfg.get_double("plant.k_cool", p.k_cool);
  p.c_amb = cfg.get_double("plant.c_amb", p.c_amb);
  p.noise_theta = cfg.get_double("plant.noise_theta", p.noise_theta);
  p.noise_l = cfg.get_double("plant.noise_l", p.noise_l);
  p.noise_T = cfg.get_double("plant.noise_T", p.noise_T);
  p.hysteresis_mm = cfg.get_double("plant.hysteresis_mm", p.hysteresis_mm);
  p.payload_kg = cfg.get_double("plant.payload_kg", p.payload_kg);
  return setup;
}

}  // namespace tdsim
