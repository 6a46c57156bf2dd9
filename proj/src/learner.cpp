#include "tdsim/learner.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "tdsim/errors.hpp"

namespace tdsim {

DataServer::DataServer(int capacity, uint64_t seed)
    : capacity_(capacity), rng_(derive_seed(seed, 0x7365727665ULL)) {
  if (capacity_ < 1) throw ShapeError("data server capacity must be >= 1");
  store_.reserve(static_cast<size_t>(capacity_));
}

void DataServer::add(const SampleRecord& rec) {
  if (static_cast<int>(store_.size()) < capacity_) {
    store_.push_back(rec);
    return;
  }
  store_[next_] = rec;  // overwrite oldest
  next_ = (next_ + 1) % store_.size();
}

const SampleRecord& DataServer::draw() {
  if (store_.empty()) throw ShapeError("draw from empty data server");
  return store_[static_cast<size_t>(rng_.uniform_int(size()))];
}

bool should_sample(const SampleRecord& prev, const SensorFrame& cur,
                   const LearnerParams& p) {
  if (cur.t - prev.t < 1.0 / p.sample_rate) return false;
  double dtheta = (cur.theta - prev.theta).cwiseAbs().maxCoeff();
  double dl = (cur.l - prev.l).cwiseAbs().maxCoeff();
  return dtheta > p.trigger_dtheta || dl > p.trigger_dl;
}

ExtractedSamples extract_samples(const SensorFrame& frame,
                                 const SelfBodyImage& image) {
  ExtractedSamples s;
  s.theta = frame.theta;
  s.T = frame.T;
  s.ijmm_target = frame.l - image.compensation(frame.theta, frame.T);
  s.mrcm_target = frame.l - image.ideal_lengths(frame.theta);
  return s;
}

MiniBatches build_minibatch(const SampleRecord& latest, DataServer& server,
                            const SelfBodyImage& image, const LearnerParams& p,
                            Rng& rng) {
  const int n = image.n_joints();
  const int m = image.n_muscles();
  const int n_b = server.empty() ? 0 : p.N_b;
  const int n_c_mrcm = server.empty() ? 0 : p.N_c;

  MiniBatches out;
  out.ijmm.inputs.resize(n, 1 + n_b + p.N_c + p.N_d);
  out.ijmm.targets.resize(m, out.ijmm.inputs.cols());
  out.mrcm.inputs.resize(n + m, 1 + n_b + n_c_mrcm + p.N_d);
  out.mrcm.targets.resize(m, out.mrcm.inputs.cols());

  int ci = 0, cm = 0;
  auto push = [&](const SampleRecord& rec) {
    out.ijmm.inputs.col(ci) = rec.theta;
    out.ijmm.targets.col(ci) = rec.l - image.compensation(rec.theta, rec.T);
    ++ci;
    out.mrcm.inputs.col(cm).head(n) = rec.theta;
    out.mrcm.inputs.col(cm).tail(m) = rec.T;
    out.mrcm.targets.col(cm) = rec.l - image.ideal_lengths(rec.theta);
    ++cm;
  };

  push(latest);
  for (int k = 0; k < n_b; ++k) push(server.draw());

  // Constraints: the ideal mapping is zero at the zero posture; the
  // correction value of a stored sample also holds at nearby angles.
  for (int k = 0; k < p.N_c; ++k) {
    out.ijmm.inputs.col(ci).setZero();
    out.ijmm.targets.col(ci).setZero();
    ++ci;
  }
  for (int k = 0; k < n_c_mrcm; ++k) {
    const SampleRecord& rec = server.draw();
    Eigen::VectorXd theta_around = rec.theta;
    for (int j = 0; j < n; ++j)
      theta_around(j) += rng.normal(0.0, p.delta_theta_div);
    out.mrcm.inputs.col(cm).head(n) = theta_around;
    out.mrcm.inputs.col(cm).tail(m) = rec.T;
    out.mrcm.targets.col(cm) = rec.l - image.ideal_lengths(rec.theta);
    ++cm;
  }

  // Self-distillation: the image's own outputs at random in-range inputs.
  for (int k = 0; k < p.N_d; ++k) {
    Eigen::VectorXd theta(n);
    for (int j = 0; j < n; ++j)
      theta(j) = rng.uniform(image.theta_lo(j), image.theta_hi(j));
    Eigen::VectorXd T(m);
    for (int i = 0; i < m; ++i) T(i) = rng.uniform(0.0, image.T_max);
    out.ijmm.inputs.col(ci) = theta;
    out.ijmm.targets.col(ci) = image.ideal_lengths(theta);
    ++ci;
    out.mrcm.inputs.col(cm).head(n) = theta;
    out.mrcm.inputs.col(cm).tail(m) = T;
    out.mrcm.targets.col(cm) = image.compensation(theta, T);
    ++cm;
  }
  return out;
}

std::pair<double, double> online_update(SelfBodyImage& image,
                                        const MiniBatches& batches, double lr,
                                        double lr_mrcm) {
  constexpr double kLossCeiling = 1e6;
  if (lr_mrcm < 0) lr_mrcm = lr;
  Mlp ijmm_backup = image.ijmm;
  Mlp mrcm_backup = image.mrcm;
  try {
    double li = image.ijmm.train_step(batches.ijmm, lr);
    double lm = image.mrcm.train_step(batches.mrcm, lr_mrcm);
    if (li > kLossCeiling || lm > kLossCeiling)
      throw TrainingDivergedError("online loss above ceiling");
    return {li, lm};
  } catch (const TrainingDivergedError& e) {
    image.ijmm = ijmm_backup;
    image.mrcm = mrcm_backup;
    throw LearnerHaltedError(std::string("online learning halted: ") + e.what());
  }
}

OnlineLearner::OnlineLearner(SelfBodyImage image, const LearnerParams& p,
                             uint64_t seed)
    : image_(std::move(image)),
      p_(p),
      server_(p.server_capacity, derive_seed(seed, 1)),
      rng_(derive_seed(seed, 2)) {}

bool OnlineLearner::observe(const SensorFrame& frame) {
  SensorFrame f = frame;
  if (p_.baseline_mode) {
    Eigen::VectorXd init = have_prev_
                               ? prev_.theta
                               : Eigen::VectorXd::Zero(image_.n_joints());
    f.theta = image_.estimate_joints(f.l, f.T, init).theta;
  }
  if (have_prev_ && !should_sample(prev_, f, p_)) return false;

  SampleRecord latest{f.theta, f.T, f.l, f.t};
  if (p_.baseline_mode) {
    MiniBatches batches;
    batches.ijmm.inputs = latest.theta;
    batches.ijmm.targets = latest.l - image_.compensation(latest.theta, latest.T);
    batches.mrcm.inputs.resize(image_.n_joints() + image_.n_muscles(), 1);
    batches.mrcm.inputs.col(0).head(image_.n_joints()) = latest.theta;
    batches.mrcm.inputs.col(0).tail(image_.n_muscles()) = latest.T;
    batches.mrcm.targets = latest.l - image_.ideal_lengths(latest.theta);
    auto losses = online_update(image_, batches, p_.lr, p_.lr_mrcm);
    last_ijmm_loss_ = losses.first;
    last_mrcm_loss_ = losses.second;
  } else {
    MiniBatches batches = build_minibatch(latest, server_, image_, p_, rng_);
    auto losses = online_update(image_, batches, p_.lr, p_.lr_mrcm);
    last_ijmm_loss_ = losses.first;
    last_mrcm_loss_ = losses.second;
    server_.add(latest);  // after batch assembly: the latest slot is separate
  }
  ++updates_;
  prev_ = latest;
  have_prev_ = true;

  if (log_) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", latest.t);
    *log_ << buf;
    auto emit = [&](const Eigen::VectorXd& v) {
      for (int i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", v(i));
        *log_ << ',' << buf;
      }
    };
    emit(latest.theta);
    emit(latest.T);
    emit(latest.l);
    *log_ << '\n';
  }
  return true;
}

void OnlineLearner::write_log_header(std::ostream& out, int n_joints,
                                     int n_muscles) {
  out << "t";
  for (int j = 0; j < n_joints; ++j) out << ",theta" << j;
  for (int i = 0; i < n_muscles; ++i) out << ",T" << i + 1;
  for (int i = 0; i < n_muscles; ++i) out << ",l" << i + 1;
  out << '\n';
}

SelfBodyImage replay_sample_log(const std::string& path, SelfBodyImage image,
                                const LearnerParams& p, uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open sample log: " + path);
  const int n = image.n_joints();
  const int m = image.n_muscles();
  OnlineLearner learner(std::move(image), p, seed);

  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("t,", 0) == 0) continue;  // header
    std::istringstream row(line);
    std::vector<double> vals;
    std::string tok;
    while (std::getline(row, tok, ','))
      vals.push_back(std::strtod(tok.c_str(), nullptr));
    if (static_cast<int>(vals.size()) != 1 + n + 2 * m)
      throw ConfigError(path, lineno,
                        "expected " + std::to_string(1 + n + 2 * m) +
                            " columns, got " + std::to_string(vals.size()));
    SensorFrame f;
    f.t = vals[0];
    f.theta = Eigen::Map<Eigen::VectorXd>(vals.data() + 1, n);
    f.T = Eigen::Map<Eigen::VectorXd>(vals.data() + 1 + n, m);
    f.l = Eigen::Map<Eigen::VectorXd>(vals.data() + 1 + n + m, m);
    f.C = Eigen::VectorXd::Zero(m);
    learner.observe(f);
  }
  return learner.image();
}

}  // namespace tdsim
