#include "tdsim/kinematics.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "tdsim/errors.hpp"

namespace tdsim {

namespace {

// World positions of every attachment point of one route.
std::vector<Eigen::Vector3d> route_world_points(
    const MuscleRoute& route, const std::vector<Eigen::Isometry3d>& frames) {
  std::vector<Eigen::Vector3d> pts;
  pts.reserve(route.points.size());
  for (const RoutePoint& p : route.points)
    pts.push_back(frames[static_cast<size_t>(p.link)] * p.pos);
  return pts;
}

double route_length(const MuscleRoute& route,
                    const std::vector<Eigen::Isometry3d>& frames) {
  double len = 0.0;
  Eigen::Vector3d prev = frames[static_cast<size_t>(route.points[0].link)] *
                         route.points[0].pos;
  for (size_t i = 1; i < route.points.size(); ++i) {
    Eigen::Vector3d cur =
        frames[static_cast<size_t>(route.points[i].link)] * route.points[i].pos;
    len += (cur - prev).norm();
    prev = cur;
  }
  return len;
}

}  // namespace

std::vector<Eigen::Isometry3d> link_frames(const Chain& chain,
                                           const Eigen::VectorXd& theta) {
  if (theta.size() != chain.n_joints())
    throw ShapeError("kinematics: theta size " + std::to_string(theta.size()) +
                     ", chain has " + std::to_string(chain.n_joints()) +
                     " joints");
  std::vector<Eigen::Isometry3d> frames(chain.joints.size() + 1);
  frames[0] = Eigen::Isometry3d::Identity();
  for (size_t i = 0; i < chain.joints.size(); ++i) {
    const Joint& j = chain.joints[i];
    frames[i + 1] = frames[i] * Eigen::Translation3d(j.offset) *
                    Eigen::AngleAxisd(theta(static_cast<Eigen::Index>(i)), j.axis);
  }
  return frames;
}

bool within_limits(const Chain& chain, const Eigen::VectorXd& theta) {
  for (int i = 0; i < chain.n_joints(); ++i)
    if (theta(i) < chain.joints[static_cast<size_t>(i)].lo ||
        theta(i) > chain.joints[static_cast<size_t>(i)].hi)
      return false;
  return true;
}

Eigen::VectorXd clamp_to_limits(const Chain& chain,
                                const Eigen::VectorXd& theta) {
  Eigen::VectorXd out = theta;
  for (int i = 0; i < chain.n_joints(); ++i) {
    const Joint& j = chain.joints[static_cast<size_t>(i)];
    out(i) = std::min(std::max(out(i), j.lo), j.hi);
  }
  return out;
}

Eigen::Vector3d forward_kinematics(const GeometricModel& model,
                                   const Eigen::VectorXd& theta,
                                   std::vector<Eigen::Isometry3d>* frames_out) {
  std::vector<Eigen::Isometry3d> frames = link_frames(model.chain, theta);
  Eigen::Vector3d ee =
      frames[static_cast<size_t>(model.chain.resolved_ee_link())] *
      model.chain.ee_offset;
  if (frames_out) *frames_out = std::move(frames);
  return ee;
}

Eigen::VectorXd muscle_lengths_abs(const GeometricModel& model,
                                   const Eigen::VectorXd& theta) {
  std::vector<Eigen::Isometry3d> frames = link_frames(model.chain, theta);
  Eigen::VectorXd l(model.n_muscles());
  for (int m = 0; m < model.n_muscles(); ++m)
    l(m) = route_length(model.routes[static_cast<size_t>(m)], frames);
  return l;
}

Eigen::VectorXd muscle_lengths_rel(const GeometricModel& model,
                                   const Eigen::VectorXd& theta) {
  return muscle_lengths_abs(model, theta) -
         muscle_lengths_abs(model, Eigen::VectorXd::Zero(model.n_joints()));
}

Eigen::MatrixXd joint_jacobian(const GeometricModel& model,
                               const Eigen::VectorXd& theta) {
  std::vector<Eigen::Isometry3d> frames;
  Eigen::Vector3d ee = forward_kinematics(model, theta, &frames);
  const int n = model.n_joints();
  const int ee_link = model.chain.resolved_ee_link();
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(3, n);
  for (int j = 0; j < n; ++j) {
    if (j >= ee_link) continue;  // joint distal to the end effector
    const Joint& jt = model.chain.joints[static_cast<size_t>(j)];
    Eigen::Vector3d axis_w = frames[static_cast<size_t>(j)].linear() * jt.axis;
    Eigen::Vector3d origin_w = frames[static_cast<size_t>(j)] * jt.offset;
    J.col(j) = axis_w.cross(ee - origin_w);
  }
  return J;
}

Eigen::MatrixXd muscle_jacobian_geo(const GeometricModel& model,
                                    const Eigen::VectorXd& theta) {
  constexpr double eps = 1e-5;  // rad
  const int n = model.n_joints();
  Eigen::MatrixXd G(model.n_muscles(), n);
  for (int j = 0; j < n; ++j) {
    Eigen::VectorXd tp = theta, tm = theta;
    tp(j) += eps;
    tm(j) -= eps;
    G.col(j) = (muscle_lengths_rel(model, tp) - muscle_lengths_rel(model, tm)) /
               (2.0 * eps);
  }
  return G;
}

Eigen::MatrixXd muscle_jacobian_analytic(const GeometricModel& model,
                                         const Eigen::VectorXd& theta) {
  std::vector<Eigen::Isometry3d> frames = link_frames(model.chain, theta);
  const int n = model.n_joints();

  // World axis and origin of every joint.
  std::vector<Eigen::Vector3d> axis_w(static_cast<size_t>(n)),
      origin_w(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    const Joint& jt = model.chain.joints[static_cast<size_t>(j)];
    axis_w[static_cast<size_t>(j)] =
        frames[static_cast<size_t>(j)].linear() * jt.axis;
    origin_w[static_cast<size_t>(j)] = frames[static_cast<size_t>(j)] * jt.offset;
  }

  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(model.n_muscles(), n);
  for (int m = 0; m < model.n_muscles(); ++m) {
    const MuscleRoute& route = model.routes[static_cast<size_t>(m)];
    std::vector<Eigen::Vector3d> pts = route_world_points(route, frames);
    for (size_t s = 0; s + 1 < pts.size(); ++s) {
      Eigen::Vector3d d = pts[s + 1] - pts[s];
      double len = d.norm();
      if (len < 1e-12) continue;
      Eigen::Vector3d u = d / len;
      int la = route.points[s].link;
      int lb = route.points[s + 1].link;
      // Point on link L moves with joints j < L.
      for (int j = 0; j < n; ++j) {
        Eigen::Vector3d dpb = (j < lb)
            ? axis_w[static_cast<size_t>(j)].cross(pts[s + 1] - origin_w[static_cast<size_t>(j)])
            : Eigen::Vector3d::Zero();
        Eigen::Vector3d dpa = (j < la)
            ? axis_w[static_cast<size_t>(j)].cross(pts[s] - origin_w[static_cast<size_t>(j)])
            : Eigen::Vector3d::Zero();
        G(m, j) += u.dot(dpb - dpa);
      }
    }
  }
  return G;
}

void GeometricModel::validate() const {
  if (chain.joints.empty()) throw ConfigError("model: no joints defined");
  for (size_t i = 0; i < chain.joints.size(); ++i) {
    const Joint& j = chain.joints[i];
    if (std::abs(j.axis.norm() - 1.0) > 1e-6)
      throw ConfigError("model: joint " + j.name + " axis is not unit length");
    if (!(j.lo < j.hi))
      throw ConfigError("model: joint " + j.name + " limits must satisfy lo < hi");
  }
  if (routes.empty()) throw ConfigError("model: no muscles defined");
  for (const MuscleRoute& r : routes) {
    if (r.points.size() < 2)
      throw ConfigError("model: muscle " + std::to_string(r.id) +
                        " needs at least 2 points");
    if (r.points.front().link == r.points.back().link)
      throw ConfigError("model: muscle " + std::to_string(r.id) +
                        " start and end on the same link");
    for (const RoutePoint& p : r.points)
      if (p.link < 0 || p.link > chain.n_joints())
        throw ConfigError("model: muscle " + std::to_string(r.id) +
                          " references link " + std::to_string(p.link) +
                          " out of range");
  }
  int ee = chain.resolved_ee_link();
  if (ee < 0 || ee > chain.n_joints())
    throw ConfigError("model: ee_link out of range");
}

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<double> parse_numbers(const std::string& text,
                                  const std::string& path, int line) {
  std::istringstream in(text);
  std::vector<double> out;
  std::string tok;
  while (in >> tok) {
    char* end = nullptr;
    double d = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0')
      throw ConfigError(path, line, "expected a number, got '" + tok + "'");
    out.push_back(d);
  }
  return out;
}

Eigen::Vector3d parse_vec3(const std::string& text, const std::string& path,
                           int line) {
  std::vector<double> v = parse_numbers(text, path, line);
  if (v.size() != 3) throw ConfigError(path, line, "expected 3 numbers");
  return {v[0], v[1], v[2]};
}

}  // namespace

GeometricModel load_model(const std::string& path, bool require_full_arm) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model file: " + path);

  GeometricModel model;
  enum class Section { kNone, kChain, kJoint, kMuscle };
  Section section = Section::kNone;
  int section_line = 0;
  Joint cur_joint;
  bool joint_has_axis = false, joint_has_offset = false, joint_has_limits = false;
  MuscleRoute cur_muscle;
  bool have_ee_offset = false;

  auto finish_section = [&]() {
    if (section == Section::kJoint) {
      if (!joint_has_axis)
        throw ConfigError(path, section_line, "joint " + cur_joint.name + " missing axis");
      if (!joint_has_offset)
        throw ConfigError(path, section_line, "joint " + cur_joint.name + " missing offset");
      if (!joint_has_limits)
        throw ConfigError(path, section_line, "joint " + cur_joint.name + " missing limits");
      model.chain.joints.push_back(cur_joint);
    } else if (section == Section::kMuscle) {
      if (cur_muscle.points.size() < 2)
        throw ConfigError(path, section_line,
                          "muscle " + std::to_string(cur_muscle.id) +
                              " needs at least 2 points");
      model.routes.push_back(cur_muscle);
    }
  };

  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(path, lineno, "unterminated section header");
      finish_section();
      std::istringstream hdr(line.substr(1, line.size() - 2));
      std::string kind, arg;
      hdr >> kind;
      std::getline(hdr, arg);
      arg = trim(arg);
      section_line = lineno;
      if (kind == "chain") {
        section = Section::kChain;
      } else if (kind == "joint") {
        if (arg.empty()) throw ConfigError(path, lineno, "joint needs a name");
        section = Section::kJoint;
        cur_joint = Joint{};
        cur_joint.name = arg;
        joint_has_axis = joint_has_offset = joint_has_limits = false;
      } else if (kind == "muscle") {
        int id = 0;
        try {
          id = std::stoi(arg);
        } catch (...) {
          throw ConfigError(path, lineno, "muscle needs a numeric id");
        }
        int expected = static_cast<int>(model.routes.size()) + 1;
        if (id != expected)
          throw ConfigError(path, lineno,
                            "muscle ids must be sequential; expected " +
                                std::to_string(expected));
        section = Section::kMuscle;
        cur_muscle = MuscleRoute{};
        cur_muscle.id = id;
      } else {
        throw ConfigError(path, lineno, "unknown section '" + kind + "'");
      }
      continue;
    }

    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path, lineno, "expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));

    switch (section) {
      case Section::kNone:
        throw ConfigError(path, lineno, "key outside any section");
      case Section::kChain:
        if (key == "ee_offset") {
          model.chain.ee_offset = parse_vec3(value, path, lineno);
          have_ee_offset = true;
        } else if (key == "ee_link") {
          std::vector<double> v = parse_numbers(value, path, lineno);
          if (v.size() != 1) throw ConfigError(path, lineno, "ee_link: one integer");
          model.chain.ee_link = static_cast<int>(v[0]);
        } else {
          throw ConfigError(path, lineno, "unknown chain key '" + key + "'");
        }
        break;
      case Section::kJoint:
        if (key == "axis") {
          Eigen::Vector3d a = parse_vec3(value, path, lineno);
          double nrm = a.norm();
          if (std::abs(nrm - 1.0) > 1e-3)
            throw ConfigError(path, lineno, "axis must be a unit vector");
          cur_joint.axis = a / nrm;
          joint_has_axis = true;
        } else if (key == "offset") {
          cur_joint.offset = parse_vec3(value, path, lineno);
          joint_has_offset = true;
        } else if (key == "limits") {
          std::vector<double> v = parse_numbers(value, path, lineno);
          if (v.size() != 2) throw ConfigError(path, lineno, "limits: lo hi");
          if (!(v[0] < v[1]))
            throw ConfigError(path, lineno, "limits must satisfy lo < hi");
          cur_joint.lo = v[0];
          cur_joint.hi = v[1];
          joint_has_limits = true;
        } else {
          throw ConfigError(path, lineno, "unknown joint key '" + key + "'");
        }
        break;
      case Section::kMuscle:
        if (key == "point") {
          std::vector<double> v = parse_numbers(value, path, lineno);
          if (v.size() != 4)
            throw ConfigError(path, lineno, "point: link x y z");
          RoutePoint p;
          p.link = static_cast<int>(v[0]);
          p.pos = {v[1], v[2], v[3]};
          cur_muscle.points.push_back(p);
        } else {
          throw ConfigError(path, lineno, "unknown muscle key '" + key + "'");
        }
        break;
    }
  }
  finish_section();

  if (!have_ee_offset)
    throw ConfigError(path + ": missing [chain] ee_offset");
  model.validate();

  if (require_full_arm) {
    if (model.n_joints() != 5)
      throw ConfigError(path + ": arm model must define 5 joints, got " +
                        std::to_string(model.n_joints()));
    if (model.n_muscles() != 10)
      throw ConfigError(path + ": arm model must define 10 muscles, got " +
                        std::to_string(model.n_muscles()));
    bool has_biarticular = false;
    for (const MuscleRoute& r : model.routes) {
      int lo = r.points.front().link, hi = lo;
      for (const RoutePoint& p : r.points) {
        lo = std::min(lo, p.link);
        hi = std::max(hi, p.link);
      }
      if (hi - lo >= 2) has_biarticular = true;
    }
    if (!has_biarticular)
      throw ConfigError(path + ": arm model needs at least one muscle crossing 2+ joints");
  }
  return model;
}

}  // namespace tdsim
