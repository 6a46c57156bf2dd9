#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <string>
#include <vector>

#include "tdsim/body_image.hpp"
#include "tdsim/plant.hpp"
#include "tdsim/rng.hpp"

namespace tdsim {

struct SampleRecord {
  Eigen::VectorXd theta;  // rad
  Eigen::VectorXd T;      // N
  Eigen::VectorXd l;      // mm
  double t = 0.0;         // s
};

// Bounded FIFO replay buffer with its own seeded RNG for uniform draws.
class DataServer {
 public:
  DataServer(int capacity, uint64_t seed);

  void add(const SampleRecord& rec);
  const SampleRecord& draw();
  int size() const { return static_cast<int>(store_.size()); }
  int capacity() const { return capacity_; }
  bool empty() const { return store_.empty(); }

 private:
  int capacity_;
  size_t next_ = 0;  // FIFO eviction slot once full
  std::vector<SampleRecord> store_;
  Rng rng_;
};

struct LearnerParams {
  int N_b = 10;  // replay draws per minibatch
  int N_c = 5;   // constraint samples
  int N_d = 5;   // self-distillation samples
  double delta_theta_div = 0.1;  // rad, std of the constraint angle noise
  double sample_rate = 2.0;      // Hz
  double trigger_dtheta = 0.05;  // rad
  double trigger_dl = 2.0;       // mm
  int server_capacity = 10000;
  // The two networks learn at different rates on purpose. The ideal-mapping
  // residual (attachment-point error) is angle-shaped and several mm, so its
  // network needs a fast rate; the correction network starts with a nearly
  // correct elasticity map, and giving it the same fast rate lets it absorb
  // the angle-shaped residual into tension-conditioned weights, which fits
  // the visited tension combinations but wrecks predictions everywhere else.
  double lr = 0.02;       // ideal-mapping network
  double lr_mrcm = 1e-3;  // correction network
  // Degraded comparison mode: joint angles come from model inversion instead
  // of the potentiometers, and the minibatch is the latest sample alone.
  bool baseline_mode = false;
};

// True when the frame is far enough from the previous accepted sample in
// time AND in angle or length.
bool should_sample(const SampleRecord& prev, const SensorFrame& cur,
                   const LearnerParams& p);

struct ExtractedSamples {
  Eigen::VectorXd theta;
  Eigen::VectorXd ijmm_target;  // l_m - g(theta, T_m)
  Eigen::VectorXd T;
  Eigen::VectorXd mrcm_target;  // l_m - f_ideal(theta)
};

// Residual decomposition of one measurement against the current image.
ExtractedSamples extract_samples(const SensorFrame& frame,
                                 const SelfBodyImage& image);

// Minibatch layout: [latest | N_b replay draws | N_c constraints |
// N_d self-distillation]. Constraint samples pin the ideal mapping at the
// zero posture and teach the correction network angle-locality; distill
// samples are the image's own outputs at random inputs. Empty server skips
// the draws (and the correction constraints, which need stored samples).
struct MiniBatches {
  TrainBatch ijmm;
  TrainBatch mrcm;
};
MiniBatches build_minibatch(const SampleRecord& latest, DataServer& server,
                            const SelfBodyImage& image, const LearnerParams& p,
                            Rng& rng);

// One SGD step per network; lr_mrcm < 0 reuses lr for both. Throws
// LearnerHaltedError if either loss exceeds 1e6 or diverges; the image is
// rolled back to its pre-update state first.
std::pair<double, double> online_update(SelfBodyImage& image,
                                        const MiniBatches& batches, double lr,
                                        double lr_mrcm = -1.0);

// Sampling, replay storage, and the dual network updates, driven at the
// learner tick.
class OnlineLearner {
 public:
  OnlineLearner(SelfBodyImage image, const LearnerParams& p, uint64_t seed);

  // Feed one sensor frame at the learner tick. Runs an update when the
  // sampling gate passes; returns true in that case.
  bool observe(const SensorFrame& frame);

  const SelfBodyImage& image() const { return image_; }
  SelfBodyImage& image() { return image_; }
  DataServer& server() { return server_; }
  const LearnerParams& params() const { return p_; }
  int updates() const { return updates_; }
  double last_ijmm_loss() const { return last_ijmm_loss_; }
  double last_mrcm_loss() const { return last_mrcm_loss_; }
  // Joint angles the learner attributed to the last accepted sample (differs
  // from the potentiometers in baseline mode).
  const Eigen::VectorXd& last_sample_theta() const { return prev_.theta; }

  // Append accepted samples as CSV rows "t, theta x n, T x m, l x m".
  void log_samples_to(std::ostream* out) { log_ = out; }
  static void write_log_header(std::ostream& out, int n_joints, int n_muscles);

 private:
  SelfBodyImage image_;
  LearnerParams p_;
  DataServer server_;
  Rng rng_;
  SampleRecord prev_;
  bool have_prev_ = false;
  int updates_ = 0;
  double last_ijmm_loss_ = 0.0, last_mrcm_loss_ = 0.0;
  std::ostream* log_ = nullptr;
};

// Re-run the online updates from a sample log produced by log_samples_to.
// With the same initial image, params, and seed this reproduces the live
// run's final weights exactly.
SelfBodyImage replay_sample_log(const std::string& path, SelfBodyImage image,
                                const LearnerParams& p, uint64_t seed);

}  // namespace tdsim
