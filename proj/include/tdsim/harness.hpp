#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdsim/body_image.hpp"
#include "tdsim/control.hpp"
#include "tdsim/learner.hpp"
#include "tdsim/plant.hpp"

namespace tdsim {

struct ScenarioInfo {
  std::string name;
  std::string summary;
};

// The six runnable experiments, in a fixed order.
const std::vector<ScenarioInfo>& scenario_catalog();
bool known_scenario(const std::string& name);

// One 2 Hz metrics sample. Scenario-specific extras (dumbbell height,
// ellipsoid axes, probe results) ride in `extras`; the column names come
// from the scenario driver so the CSV header stays self-describing.
struct MetricsRow {
  double t = 0.0;            // s
  double rmse_target = 0.0;  // rad, current vs commanded joints
  double rmse_est = 0.0;     // rad, current vs image-estimated joints
  double max_T = 0.0;        // N
  double max_C = 0.0;        // degC
  std::vector<double> extras;
};

// Fully resolved scenario description. load_scenario_config() fills
// defaults, resolves paths relative to the config file, and checks that the
// referenced files exist. All fields stay public so tests can tweak a
// loaded config before running it.
struct ScenarioConfig {
  std::string name;
  std::string config_path;  // file it came from ("" when built in code)
  std::string plant_path;   // resolved plant config
  std::string model_path;   // resolved geometry file (from the plant config)
  PlantSetup plant;         // parsed physics + nominal geometry

  uint64_t seed = 1;
  int cycles = 300;         // target-posture cycles (cycle-driven scenarios)
  double duration_s = 0.0;  // fixed-command runs; 0 = cycles decide
  double stage1_s = 5.0;    // reach with bias-tension model
  double stage2_s = 2.0;    // re-command with measured tensions
  double stage3_s = 3.0;    // hold a random tension set
  double target_span = 1.0; // random targets cover this fraction of each range

  double T_bias = 10.0;   // N
  double K_stiff = 10.0;  // N/mm; the tendon-series stiffness caps what
                          // lower gains can hold against bias-torque sag

  bool learner_enabled = true;
  LearnerParams learner;

  bool safety_enabled = true;
  SafetyParams safety;

  InitialTrainParams train;
  std::string image_cache;  // reuse a trained image across runs ("" = retrain)

  // longrun: what the summary judges. "learning" checks the RMSE decay and
  // (if scheduled) the rupture recovery; the safety objectives check the
  // temperature/tension envelope under an unreachable command.
  enum class Objective { kLearning, kSafetyOn, kSafetyOff };
  Objective objective = Objective::kLearning;
  std::vector<double> fixed_target;  // rad; may sit beyond the joint stops
  int rupture_muscle = 0;            // 1-based, 0 = no rupture
  int rupture_cycle = 0;

  // compare_learning
  int disturb_cycle = 0;           // 0 = no disturbance
  double disturb_force_n = 30.0;   // +x at the end effector
  double disturb_duration_s = 2.0;
  int post_cycles = 2;             // extra cycles after the disturbance

  // dumbbell
  double payload_kg = 0.0;
  std::vector<double> lift_posture;

  // variable_stiffness / stiffness_eval
  std::vector<double> probe_posture;
  int warmup_cycles = 3;
  double k_target_scale = 2.0;
  int n_probes = 8;
  double probe_force_n = 10.0;
  double probe_hold_s = 2.0;
  double settle_s = 3.0;
  Eigen::Vector3d probe_axis1{1.0, 0.0, 0.0};
  Eigen::Vector3d probe_axis2{0.0, 1.0, 0.0};

  // impact
  std::vector<double> impact_posture;
  double tension_low = 10.0;   // N, soft co-contraction
  double tension_high = 80.0;  // N, stiff co-contraction
  double impact_peak_n = 50.0;
  double impact_ms = 50.0;
  Eigen::Vector3d impact_dir{1.0, 0.0, 0.0};
};

// Parse a sectioned key-value scenario file. Throws ConfigError (with file
// and line) on unknown scenario names, missing files, or bad values.
ScenarioConfig load_scenario_config(const std::string& path);

// The pre-trained self-body image a scenario starts from. Honors
// cfg.image_cache: a compatible cached image is loaded as-is, otherwise the
// image is trained from the nominal geometry and saved back. Training is
// seeded independently of cfg.seed so every scenario shares one image.
SelfBodyImage scenario_image(const ScenarioConfig& cfg);

struct ScenarioResult {
  std::string name;
  bool pass = false;
  nlohmann::json summary;    // what the summary JSON file contains
  std::string csv;           // full metrics CSV text
  std::string csv_path;      // "" when not written
  std::string summary_path;  // "" when not written
};

// Run one scenario to completion. Deterministic for a fixed config + seed.
// Writes <name>_metrics.csv / <name>_summary.json (and, for learning runs,
// <name>_samples.csv) under out_dir when the flags ask for them. Throws on
// configuration or simulation errors; threshold failures only clear `pass`.
ScenarioResult run_scenario(const ScenarioConfig& cfg, const std::string& out_dir,
                            bool write_csv = true, bool write_summary = true);

}  // namespace tdsim
