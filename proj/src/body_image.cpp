#include "tdsim/body_image.hpp"

#include <cmath>
#include <fstream>

#include "tdsim/errors.hpp"

namespace tdsim {

namespace {
constexpr char kMagic[4] = {'T', 'D', 'B', 'I'};
constexpr uint32_t kFormatVersion = 1;
}  // namespace

SelfBodyImage::SelfBodyImage(int n_joints, int n_muscles, int hidden_dim)
    : ijmm(n_joints, hidden_dim, n_muscles),
      mrcm(n_joints + n_muscles, hidden_dim, n_muscles),
      theta_lo(Eigen::VectorXd::Constant(n_joints, -M_PI)),
      theta_hi(Eigen::VectorXd::Constant(n_joints, M_PI)) {}

Eigen::VectorXd SelfBodyImage::stack_input(const Eigen::VectorXd& theta,
                                           const Eigen::VectorXd& T) const {
  Eigen::VectorXd x(theta.size() + T.size());
  x << theta, T;
  return x;
}

Eigen::VectorXd SelfBodyImage::ideal_lengths(const Eigen::VectorXd& theta) const {
  return ijmm.forward(theta);
}

Eigen::VectorXd SelfBodyImage::compensation(const Eigen::VectorXd& theta,
                                            const Eigen::VectorXd& T) const {
  return mrcm.forward(stack_input(theta, T));
}

Eigen::VectorXd SelfBodyImage::predict_lengths(const Eigen::VectorXd& theta,
                                               const Eigen::VectorXd& T) const {
  return ideal_lengths(theta) + compensation(theta, T);
}

Eigen::MatrixXd SelfBodyImage::muscle_jacobian(const Eigen::VectorXd& theta) const {
  return ijmm.input_jacobian(theta);
}

Eigen::MatrixXd SelfBodyImage::predict_jacobian_theta(
    const Eigen::VectorXd& theta, const Eigen::VectorXd& T) const {
  return ijmm.input_jacobian(theta) +
         mrcm.input_jacobian(stack_input(theta, T)).leftCols(theta.size());
}

Eigen::MatrixXd SelfBodyImage::muscle_stiffness(const Eigen::VectorXd& theta,
                                                const Eigen::VectorXd& T) const {
  const int m = n_muscles();
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(m, m);
  Eigen::VectorXd x = stack_input(theta, T);
  const int n = static_cast<int>(theta.size());
  for (int i = 0; i < m; ++i) {
    // Keep the +-10 N window inside the trained tension range.
    double lo = std::max(0.0, std::min(T(i) - kStiffnessWindow,
                                       T_max - 2.0 * kStiffnessWindow));
    double step = 2.0 * kStiffnessWindow / (kStiffnessPoints - 1);
    double mean_t = 0.0, mean_y = 0.0;
    double ts[kStiffnessPoints], ys[kStiffnessPoints];
    for (int k = 0; k < kStiffnessPoints; ++k) {
      double tk = lo + k * step;
      Eigen::VectorXd xk = x;
      xk(n + i) = tk;
      ts[k] = tk;
      ys[k] = mrcm.forward(xk)(i);
      mean_t += tk;
      mean_y += ys[k];
    }
    mean_t /= kStiffnessPoints;
    mean_y /= kStiffnessPoints;
    double num = 0.0, den = 0.0;
    for (int k = 0; k < kStiffnessPoints; ++k) {
      num += (ts[k] - mean_t) * (ys[k] - mean_y);
      den += (ts[k] - mean_t) * (ts[k] - mean_t);
    }
    double slope = num / den;  // mm/N, physically negative
    K(i, i) = slope < -kSlopeMin ? -1.0 / slope : kStiffnessCap;
  }
  return K;
}

JointEstimate SelfBodyImage::estimate_joints(
    const Eigen::VectorXd& l_m, const Eigen::VectorXd& T_m,
    const Eigen::VectorXd& theta_init) const {
  constexpr double kDamping = 1e-3;
  constexpr double kStepTol = 1e-4;  // rad
  constexpr int kMaxIters = 50;
  constexpr int kStallIters = 5;

  const int n = n_joints();
  auto clamp = [&](Eigen::VectorXd th) {
    for (int j = 0; j < n; ++j)
      th(j) = std::min(std::max(th(j), theta_lo(j)), theta_hi(j));
    return th;
  };

  JointEstimate est;
  Eigen::VectorXd theta = clamp(theta_init);
  double best_res = (l_m - predict_lengths(theta, T_m)).norm();
  Eigen::VectorXd best_theta = theta;
  int non_improving = 0;

  for (int it = 1; it <= kMaxIters; ++it) {
    est.iterations = it;
    Eigen::VectorXd r = l_m - predict_lengths(theta, T_m);
    Eigen::MatrixXd A = predict_jacobian_theta(theta, T_m);
    Eigen::MatrixXd H = A.transpose() * A;
    H.diagonal().array() += kDamping;
    Eigen::VectorXd delta = H.ldlt().solve(A.transpose() * r);
    theta = clamp(theta + delta);

    double res = (l_m - predict_lengths(theta, T_m)).norm();
    if (res < best_res) {
      best_res = res;
      best_theta = theta;
      non_improving = 0;
    } else {
      ++non_improving;
    }
    if (delta.cwiseAbs().maxCoeff() < kStepTol) break;
    if (non_improving >= kStallIters) {
      est.stalled = true;
      break;
    }
  }
  est.theta = best_theta;
  est.residual = best_res;
  return est;
}

void SelfBodyImage::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write image file: " + path);
  out.write(kMagic, 4);
  uint32_t hdr[3] = {kFormatVersion, static_cast<uint32_t>(n_joints()),
                     static_cast<uint32_t>(n_muscles())};
  out.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
  out.write(reinterpret_cast<const char*>(theta_lo.data()),
            static_cast<std::streamsize>(sizeof(double) * theta_lo.size()));
  out.write(reinterpret_cast<const char*>(theta_hi.data()),
            static_cast<std::streamsize>(sizeof(double) * theta_hi.size()));
  out.write(reinterpret_cast<const char*>(&T_max), sizeof(double));
  ijmm.save(out);
  mrcm.save(out);
  if (!out) throw ConfigError("write failed: " + path);
}

SelfBodyImage SelfBodyImage::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open image file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw ConfigError("not an image file (bad magic): " + path);
  uint32_t hdr[3];
  in.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
  if (!in) throw ConfigError("truncated image file: " + path);
  if (hdr[0] != kFormatVersion)
    throw ConfigError("unsupported image file version " +
                      std::to_string(hdr[0]) + ": " + path);
  const int n = static_cast<int>(hdr[1]);
  const int m = static_cast<int>(hdr[2]);
  SelfBodyImage img(n, m, 1);
  img.theta_lo.resize(n);
  img.theta_hi.resize(n);
  in.read(reinterpret_cast<char*>(img.theta_lo.data()),
          static_cast<std::streamsize>(sizeof(double) * n));
  in.read(reinterpret_cast<char*>(img.theta_hi.data()),
          static_cast<std::streamsize>(sizeof(double) * n));
  in.read(reinterpret_cast<char*>(&img.T_max), sizeof(double));
  if (!in) throw ConfigError("truncated image file: " + path);
  img.ijmm = Mlp::load(in, path);
  img.mrcm = Mlp::load(in, path);
  if (img.ijmm.in_dim() != n || img.ijmm.out_dim() != m ||
      img.mrcm.in_dim() != n + m || img.mrcm.out_dim() != m)
    throw ConfigError("image file dims inconsistent: " + path);
  return img;
}

namespace {

// Deterministic SGD loop with validation plateau stopping. Returns the best
// validation RMSE in output units (mm).
double train_to_plateau(Mlp& net, const Eigen::MatrixXd& X,
                        const Eigen::MatrixXd& Y, const InitialTrainParams& o,
                        Rng& rng) {
  const int total = static_cast<int>(X.cols());
  const int n_val = std::max(1, static_cast<int>(total * o.val_fraction));
  const int n_train = total - n_val;
  if (n_train < 1) throw InitialTrainingFailedError("too few samples", 1e9);

  Eigen::MatrixXd Xt = X.leftCols(n_train), Yt = Y.leftCols(n_train);
  Eigen::MatrixXd Xv = X.rightCols(n_val), Yv = Y.rightCols(n_val);
  net.fit_normalization(Xt, Yt);

  auto val_rmse = [&]() {
    Eigen::MatrixXd P = net.forward_batch(Xv, o.policy);
    return std::sqrt((P - Yv).array().square().mean());
  };

  std::vector<int> perm(static_cast<size_t>(n_train));
  for (int i = 0; i < n_train; ++i) perm[static_cast<size_t>(i)] = i;

  double best = val_rmse();
  int best_epoch = 0;
  for (int epoch = 1; epoch <= o.max_epochs; ++epoch) {
    for (int i = n_train - 1; i > 0; --i) {
      int j = rng.uniform_int(i + 1);
      std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
    }
    for (int start = 0; start < n_train; start += o.batch_size) {
      int bs = std::min(o.batch_size, n_train - start);
      TrainBatch batch;
      batch.inputs.resize(X.rows(), bs);
      batch.targets.resize(Y.rows(), bs);
      for (int k = 0; k < bs; ++k) {
        int idx = perm[static_cast<size_t>(start + k)];
        batch.inputs.col(k) = Xt.col(idx);
        batch.targets.col(k) = Yt.col(idx);
      }
      net.train_step(batch, o.lr, o.policy);
    }
    double v = val_rmse();
    if (v < best * (1.0 - 1e-3)) {
      best = v;
      best_epoch = epoch;
    }
    if (epoch - best_epoch >= o.plateau_epochs) break;
  }
  return best;
}

}  // namespace

SelfBodyImage initial_train(const GeometricModel& nominal,
                            const std::vector<ElasticityParams>& elasticity,
                            int n_samples, uint64_t seed,
                            const InitialTrainParams& opts) {
  const int n = nominal.n_joints();
  const int m = nominal.n_muscles();
  if (static_cast<int>(elasticity.size()) != m)
    throw ShapeError("initial_train: elasticity size != muscle count");
  if (n_samples < 1000)
    throw InitialTrainingFailedError("initial_train: need >= 1000 samples", 1e9);

  Rng rng(derive_seed(seed, 0x696e6974ULL));

  Eigen::VectorXd l0 = muscle_lengths_abs(nominal, Eigen::VectorXd::Zero(n));
  Eigen::MatrixXd Xi(n, n_samples), Yi(m, n_samples);
  Eigen::MatrixXd Xm(n + m, n_samples), Ym(m, n_samples);
  for (int s = 0; s < n_samples; ++s) {
    Eigen::VectorXd theta(n);
    bool anchor_theta = rng.uniform() < opts.anchor_fraction;
    for (int j = 0; j < n; ++j) {
      const Joint& jt = nominal.chain.joints[static_cast<size_t>(j)];
      theta(j) = anchor_theta ? 0.0 : rng.uniform(jt.lo, jt.hi);
    }
    Eigen::VectorXd l_abs = muscle_lengths_abs(nominal, theta);
    Xi.col(s) = theta;
    Yi.col(s) = l_abs - l0;

    bool anchor_T = rng.uniform() < opts.anchor_fraction;
    Eigen::VectorXd T(m);
    for (int i = 0; i < m; ++i)
      T(i) = anchor_T ? 0.0 : rng.uniform(0.0, opts.T_max);
    Xm.col(s).head(n) = theta;
    Xm.col(s).tail(m) = T;
    for (int i = 0; i < m; ++i)
      Ym(i, s) = -elongation(elasticity[static_cast<size_t>(i)], l_abs(i), T(i));
  }

  SelfBodyImage img(n, m, opts.hidden_dim);
  img.T_max = opts.T_max;
  img.theta_lo.resize(n);
  img.theta_hi.resize(n);
  for (int j = 0; j < n; ++j) {
    img.theta_lo(j) = nominal.chain.joints[static_cast<size_t>(j)].lo;
    img.theta_hi(j) = nominal.chain.joints[static_cast<size_t>(j)].hi;
  }

  Rng rng_i(derive_seed(seed, 0x696a6d6dULL));
  Rng rng_m(derive_seed(seed, 0x6d72636dULL));
  img.ijmm = Mlp(n, opts.hidden_dim, m, rng_i);
  img.mrcm = Mlp(n + m, opts.hidden_dim, m, rng_m);

  double rmse_i = train_to_plateau(img.ijmm, Xi, Yi, opts, rng_i);
  double rmse_m = train_to_plateau(img.mrcm, Xm, Ym, opts, rng_m);
  double worst = std::max(rmse_i, rmse_m);
  if (worst > opts.fail_rmse_mm)
    throw InitialTrainingFailedError(
        "initial training did not converge: val RMSE " + std::to_string(worst) +
            " mm (ijmm " + std::to_string(rmse_i) + ", mrcm " +
            std::to_string(rmse_m) + ")",
        worst);
  return img;
}

}  // namespace tdsim
