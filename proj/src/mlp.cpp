#include "tdsim/mlp.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "tdsim/errors.hpp"

namespace tdsim {

namespace {

constexpr char kMagic[4] = {'T', 'D', 'N', 'N'};
constexpr uint32_t kFormatVersion = 1;

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// y(:, j) = W * x(:, j) + b, sigmoid applied when `squash`. Each output entry
// is a serial dot product over k; parallelism is across independent columns j
// only, so the result does not depend on the thread count.
void affine_cols(const Eigen::MatrixXd& W, const Eigen::VectorXd& b,
                 const Eigen::MatrixXd& X, Eigen::MatrixXd& Y, bool squash,
                 bool par) {
  const int n = static_cast<int>(X.cols());
  const int rows = static_cast<int>(W.rows());
  const int cols = static_cast<int>(W.cols());
#pragma omp parallel for schedule(static) if (par)
  for (int j = 0; j < n; ++j) {
    for (int r = 0; r < rows; ++r) {
      double acc = b(r);
      for (int k = 0; k < cols; ++k) acc += W(r, k) * X(k, j);
      Y(r, j) = squash ? sigmoid(acc) : acc;
    }
  }
}

// G = D * A^T accumulated serially over samples per entry; parallel across
// weight rows r. gb(r) = sum_j D(r, j).
void grad_outer(const Eigen::MatrixXd& D, const Eigen::MatrixXd& A,
                Eigen::MatrixXd& gW, Eigen::VectorXd& gb, bool par) {
  const int n = static_cast<int>(D.cols());
  const int rows = static_cast<int>(gW.rows());
  const int cols = static_cast<int>(gW.cols());
#pragma omp parallel for schedule(static) if (par)
  for (int r = 0; r < rows; ++r) {
    double bacc = 0.0;
    for (int j = 0; j < n; ++j) bacc += D(r, j);
    gb(r) = bacc;
    for (int k = 0; k < cols; ++k) {
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += D(r, j) * A(k, j);
      gW(r, k) = acc;
    }
  }
}

}  // namespace

Mlp::Mlp(int in_dim, int hidden_dim, int out_dim)
    : W1(Eigen::MatrixXd::Zero(hidden_dim, in_dim)),
      W2(Eigen::MatrixXd::Zero(out_dim, hidden_dim)),
      b1(Eigen::VectorXd::Zero(hidden_dim)),
      b2(Eigen::VectorXd::Zero(out_dim)),
      in_mean(Eigen::VectorXd::Zero(in_dim)),
      in_scale(Eigen::VectorXd::Ones(in_dim)),
      out_mean(Eigen::VectorXd::Zero(out_dim)),
      out_scale(Eigen::VectorXd::Ones(out_dim)) {
  if (in_dim <= 0 || hidden_dim <= 0 || out_dim <= 0)
    throw ShapeError("mlp: layer dims must be positive");
}

Mlp::Mlp(int in_dim, int hidden_dim, int out_dim, Rng& rng)
    : Mlp(in_dim, hidden_dim, out_dim) {
  const double r1 = 1.0 / std::sqrt(static_cast<double>(in_dim));
  for (int r = 0; r < hidden_dim; ++r)
    for (int k = 0; k < in_dim; ++k) W1(r, k) = rng.uniform(-r1, r1);
  const double r2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  for (int r = 0; r < out_dim; ++r)
    for (int k = 0; k < hidden_dim; ++k) W2(r, k) = rng.uniform(-r2, r2);
}

void Mlp::check_input_dim(Eigen::Index rows) const {
  if (rows != W1.cols())
    throw ShapeError("mlp: input dim " + std::to_string(rows) + ", expected " +
                     std::to_string(W1.cols()));
}

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& x) const {
  return forward_batch(x, ExecPolicy::kSerial).col(0);
}

Eigen::MatrixXd Mlp::forward_batch(const Eigen::MatrixXd& X,
                                   ExecPolicy policy) const {
  check_input_dim(X.rows());
  const bool par = policy == ExecPolicy::kParallel;
  Eigen::MatrixXd Xn =
      (X.colwise() - in_mean).array().colwise() / in_scale.array();
  Eigen::MatrixXd A1(hidden_dim(), X.cols());
  affine_cols(W1, b1, Xn, A1, true, par);
  Eigen::MatrixXd Yn(out_dim(), X.cols());
  affine_cols(W2, b2, A1, Yn, false, par);
  return (Yn.array().colwise() * out_scale.array()).colwise() +
         out_mean.array();
}

double Mlp::train_step(const TrainBatch& batch, double lr, ExecPolicy policy) {
  if (batch.size() == 0) throw ShapeError("mlp: empty batch");
  check_input_dim(batch.inputs.rows());
  if (batch.targets.rows() != W2.rows() ||
      batch.targets.cols() != batch.inputs.cols())
    throw ShapeError("mlp: target shape mismatch");
  const bool par = policy == ExecPolicy::kParallel;
  const int n = batch.size();

  Eigen::MatrixXd Xn =
      (batch.inputs.colwise() - in_mean).array().colwise() / in_scale.array();
  Eigen::MatrixXd Tn =
      (batch.targets.colwise() - out_mean).array().colwise() /
      out_scale.array();

  Eigen::MatrixXd A1(hidden_dim(), n);
  affine_cols(W1, b1, Xn, A1, true, par);
  Eigen::MatrixXd Yn(out_dim(), n);
  affine_cols(W2, b2, A1, Yn, false, par);

  double loss = 0.0;
  for (int j = 0; j < n; ++j)
    for (int r = 0; r < out_dim(); ++r) {
      double d = Yn(r, j) - Tn(r, j);
      loss += d * d;
    }
  loss /= static_cast<double>(n) * out_dim();
  if (!std::isfinite(loss))
    throw TrainingDivergedError("mlp: non-finite loss in train_step");

  const double c = 2.0 / (static_cast<double>(n) * out_dim());
  Eigen::MatrixXd dY = c * (Yn - Tn);

  Eigen::MatrixXd gW2(W2.rows(), W2.cols());
  Eigen::VectorXd gb2(b2.size());
  grad_outer(dY, A1, gW2, gb2, par);

  // dZ1(k, j) = (sum_r W2(r, k) dY(r, j)) * s'(z1); serial over r per entry.
  Eigen::MatrixXd dZ1(hidden_dim(), n);
  {
    const int h = hidden_dim();
    const int out = out_dim();
#pragma omp parallel for schedule(static) if (par)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < h; ++k) {
        double acc = 0.0;
        for (int r = 0; r < out; ++r) acc += W2(r, k) * dY(r, j);
        dZ1(k, j) = acc * A1(k, j) * (1.0 - A1(k, j));
      }
  }

  Eigen::MatrixXd gW1(W1.rows(), W1.cols());
  Eigen::VectorXd gb1(b1.size());
  grad_outer(dZ1, Xn, gW1, gb1, par);

  W1 -= lr * gW1;
  b1 -= lr * gb1;
  W2 -= lr * gW2;
  b2 -= lr * gb2;
  return loss;
}

Eigen::MatrixXd Mlp::input_jacobian(const Eigen::VectorXd& x) const {
  check_input_dim(x.rows());
  Eigen::VectorXd xn =
      (x - in_mean).array() / in_scale.array();
  Eigen::VectorXd s = (W1 * xn + b1).unaryExpr([](double z) { return sigmoid(z); });
  Eigen::VectorXd ds = s.array() * (1.0 - s.array());
  Eigen::MatrixXd J = W2 * ds.asDiagonal() * W1;
  J.array().colwise() *= out_scale.array();
  J.array().rowwise() /= in_scale.transpose().array();
  return J;
}

void Mlp::set_normalization(const Eigen::VectorXd& im, const Eigen::VectorXd& is,
                            const Eigen::VectorXd& om,
                            const Eigen::VectorXd& os) {
  if (im.size() != in_dim() || is.size() != in_dim() ||
      om.size() != out_dim() || os.size() != out_dim())
    throw ShapeError("mlp: normalization dim mismatch");
  if ((is.array() <= 0).any() || (os.array() <= 0).any())
    throw ShapeError("mlp: normalization scales must be positive");
  in_mean = im;
  in_scale = is;
  out_mean = om;
  out_scale = os;
}

void Mlp::fit_normalization(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                            double min_scale) {
  auto stats = [min_scale](const Eigen::MatrixXd& M, Eigen::VectorXd& mean,
                           Eigen::VectorXd& scale) {
    mean = M.rowwise().mean();
    Eigen::MatrixXd centered = M.colwise() - mean;
    scale = (centered.array().square().rowwise().mean()).sqrt();
    scale = scale.cwiseMax(min_scale);
  };
  Eigen::VectorXd im, is, om, os;
  stats(X, im, is);
  stats(Y, om, os);
  set_normalization(im, is, om, os);
}

namespace {

void write_doubles(std::ostream& out, const double* p, size_t count) {
  out.write(reinterpret_cast<const char*>(p),
            static_cast<std::streamsize>(count * sizeof(double)));
}

void read_doubles(std::istream& in, double* p, size_t count,
                  const std::string& context) {
  in.read(reinterpret_cast<char*>(p),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw ConfigError("truncated network data: " + context);
}

void write_matrix_rowmajor(std::ostream& out, const Eigen::MatrixXd& M) {
  for (Eigen::Index r = 0; r < M.rows(); ++r)
    for (Eigen::Index c = 0; c < M.cols(); ++c) {
      double v = M(r, c);
      write_doubles(out, &v, 1);
    }
}

void read_matrix_rowmajor(std::istream& in, Eigen::MatrixXd& M,
                          const std::string& context) {
  for (Eigen::Index r = 0; r < M.rows(); ++r)
    for (Eigen::Index c = 0; c < M.cols(); ++c)
      read_doubles(in, &M(r, c), 1, context);
}

}  // namespace

void Mlp::save(std::ostream& out) const {
  out.write(kMagic, 4);
  uint32_t hdr[4] = {kFormatVersion, static_cast<uint32_t>(in_dim()),
                     static_cast<uint32_t>(hidden_dim()),
                     static_cast<uint32_t>(out_dim())};
  out.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
  write_doubles(out, in_mean.data(), in_mean.size());
  write_doubles(out, in_scale.data(), in_scale.size());
  write_doubles(out, out_mean.data(), out_mean.size());
  write_doubles(out, out_scale.data(), out_scale.size());
  write_matrix_rowmajor(out, W1);
  write_doubles(out, b1.data(), b1.size());
  write_matrix_rowmajor(out, W2);
  write_doubles(out, b2.data(), b2.size());
}

Mlp Mlp::load(std::istream& in, const std::string& context) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw ConfigError("not network data (bad magic): " + context);
  uint32_t hdr[4];
  in.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
  if (!in) throw ConfigError("truncated network data: " + context);
  if (hdr[0] != kFormatVersion)
    throw ConfigError("unsupported network format version " +
                      std::to_string(hdr[0]) + ": " + context);
  Mlp net(static_cast<int>(hdr[1]), static_cast<int>(hdr[2]),
          static_cast<int>(hdr[3]));
  read_doubles(in, net.in_mean.data(), net.in_mean.size(), context);
  read_doubles(in, net.in_scale.data(), net.in_scale.size(), context);
  read_doubles(in, net.out_mean.data(), net.out_mean.size(), context);
  read_doubles(in, net.out_scale.data(), net.out_scale.size(), context);
  read_matrix_rowmajor(in, net.W1, context);
  read_doubles(in, net.b1.data(), net.b1.size(), context);
  read_matrix_rowmajor(in, net.W2, context);
  read_doubles(in, net.b2.data(), net.b2.size(), context);
  return net;
}

void Mlp::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write network file: " + path);
  save(out);
  if (!out) throw ConfigError("write failed: " + path);
}

Mlp Mlp::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open network file: " + path);
  return load(in, path);
}

bool Mlp::operator==(const Mlp& o) const {
  auto same = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(),
                       sizeof(double) * static_cast<size_t>(a.size())) == 0;
  };
  return same(W1, o.W1) && same(W2, o.W2) && same(b1, o.b1) &&
         same(b2, o.b2) && same(in_mean, o.in_mean) &&
         same(in_scale, o.in_scale) && same(out_mean, o.out_mean) &&
         same(out_scale, o.out_scale);
}

}  // namespace tdsim
