#include "cmvs/kinematics.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "cmvs/error.hpp"

namespace cmvs {

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;
const char* const kJointNames[7] = {"q1", "q2", "q3", "q4", "q5", "q6", "q7"};

}  // namespace

Vec6 JointConfig::task() const {
  Vec6 t;
  t << q1, q2, q3, q4, q5, r();
  return t;
}

JointConfig JointConfig::from_task(const Vec6& task, double opening) {
  return {task(0), task(1), task(2), task(3), task(4), task(5) + 0.5 * opening, task(5) - 0.5 * opening};
}

JointConfig JointConfig::from_array(const std::array<double, 7>& a) {
  return {a[0], a[1], a[2], a[3], a[4], a[5], a[6]};
}

JointLimits JointLimits::mechanism() {
  JointLimits limits;
  const double deg60 = deg2rad(60.0);
  limits.joints = {Range{0.0, 30.0},      Range{-deg2rad(45.0), deg2rad(45.0)},
                   Range{-deg60, deg60},  Range{-deg60, deg60},
                   Range{-deg60, deg60},  Range{-deg60, deg60},
                   Range{-deg60, deg60}};
  return limits;
}

bool JointLimits::contains(const JointConfig& q) const {
  const auto a = q.as_array();
  for (int i = 0; i < 7; ++i) {
    if (!joints[i].contains(a[i])) return false;
  }
  return true;
}

void JointLimits::validate(const JointConfig& q) const {
  const auto a = q.as_array();
  for (int i = 0; i < 7; ++i) {
    if (!joints[i].contains(a[i])) {
      throw Error(ErrorCode::JointLimitViolation, std::string(kJointNames[i]) + " = " + std::to_string(a[i]) +
                                                       " outside [" + std::to_string(joints[i].min) + ", " +
                                                       std::to_string(joints[i].max) + "]");
    }
  }
}

Range JointLimits::task_range(int i, double opening) const {
  if (i < 5) return joints[i];
  const double half = 0.5 * opening;
  return {std::max(joints[5].min - half, joints[6].min + half), std::min(joints[5].max - half, joints[6].max + half)};
}

Vec6 JointLimits::clamp_task(const Vec6& task, double opening) const {
  Vec6 out;
  for (int i = 0; i < 6; ++i) out(i) = task_range(i, opening).clamp(task(i));
  return out;
}

void GeometryParams::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw Error(ErrorCode::InvalidConfig, std::string("geometry.") + name + " must be positive");
  };
  positive(element_length, "element_length");
  positive(element_offset, "element_offset");
  positive(connector_length, "connector_length");
  positive(hinge_length, "hinge_length");
  positive(jaw_length, "jaw_length");
  positive(hinge_radius, "hinge_radius");
  positive(jaw_radius, "jaw_radius");
  if (elements_per_segment < 2 || elements_per_segment % 2 != 0) {
    throw Error(ErrorCode::InvalidConfig, "geometry.elements_per_segment must be even and >= 2");
  }
}

double GeometryParams::straight_length() const {
  return 2.0 * elements_per_segment * (element_length + element_offset) + connector_length + hinge_length +
         jaw_length;
}

double prb_element_translation(double theta, const GeometryParams& geo) {
  const double l = geo.element_length;
  const double h = geo.element_offset;
  if (std::abs(theta) < 1e-4) {
    return l * std::cos(theta / 2.0) + h * (1.0 - theta * theta / 24.0);
  }
  return l * std::cos(theta / 2.0) + 2.0 * h / theta * std::sin(theta / 2.0);
}

double prb_element_translation_derivative(double theta, const GeometryParams& geo) {
  const double l = geo.element_length;
  const double h = geo.element_offset;
  double sinc_slope;
  if (std::abs(theta) < 1e-3) {
    sinc_slope = -theta / 12.0 + theta * theta * theta / 480.0;
  } else {
    sinc_slope = std::cos(theta / 2.0) / theta - 2.0 * std::sin(theta / 2.0) / (theta * theta);
  }
  return -0.5 * l * std::sin(theta / 2.0) + h * sinc_slope;
}

RigidTransform prb_element_transform(double theta, const GeometryParams& geo) {
  const RigidTransform half = RigidTransform::rot_z(theta / 2.0);
  return half * RigidTransform::trans_x(prb_element_translation(theta, geo)) * half;
}

RigidTransform prb_module_transform(double theta_pitch, double theta_yaw, const GeometryParams& geo) {
  return prb_element_transform(theta_pitch, geo) * RigidTransform::rot_x(-kHalfPi) *
         prb_element_transform(theta_yaw, geo) * RigidTransform::rot_x(kHalfPi);
}

std::vector<double> distribute_segment_bend(double theta_segment, int n_slit, double per_slit_limit) {
  if (n_slit <= 0) throw Error(ErrorCode::InvalidConfig, "slit count must be positive");
  if (std::abs(theta_segment) > n_slit * per_slit_limit) {
    throw Error(ErrorCode::BendLimitExceeded, "segment bend " + std::to_string(theta_segment) + " rad exceeds " +
                                                  std::to_string(n_slit) + " x " + std::to_string(per_slit_limit));
  }
  return std::vector<double>(static_cast<std::size_t>(n_slit), theta_segment / n_slit);
}

RigidTransform walk_chain(const JointConfig& q, const GeometryParams& geo, std::vector<JointMotion>* motions) {
  RigidTransform frame;
  auto record = [&](int index, double weight, bool prismatic, const Vec3& local_axis) {
    if (motions) {
      motions->push_back({index, weight, prismatic, frame.rotation.rotate(local_axis), frame.translation});
    }
  };
  auto bend = [&](double theta, int index, double weight) {
    record(index, 0.5 * weight, false, Vec3::UnitZ());
    frame = frame * RigidTransform::rot_z(theta / 2.0);
    record(index, prb_element_translation_derivative(theta, geo) * weight, true, Vec3::UnitX());
    frame = frame * RigidTransform::trans_x(prb_element_translation(theta, geo));
    record(index, 0.5 * weight, false, Vec3::UnitZ());
    frame = frame * RigidTransform::rot_z(theta / 2.0);
  };

  record(0, 1.0, true, Vec3::UnitX());
  frame = frame * RigidTransform::trans_x(q.q1);
  record(1, 1.0, false, Vec3::UnitX());
  frame = frame * RigidTransform::rot_x(q.q2);

  // Segment 1 alternates pitch and yaw slits, so each bend is shared by half
  // of the segment's elements.
  const int modules = geo.elements_per_segment / 2;
  const double pitch = q.q3 / modules;
  const double yaw = q.q4 / modules;
  for (int k = 0; k < modules; ++k) {
    bend(pitch, 2, 1.0 / modules);
    frame = frame * RigidTransform::rot_x(-kHalfPi);
    bend(yaw, 3, 1.0 / modules);
    frame = frame * RigidTransform::rot_x(kHalfPi);
  }

  frame = frame * RigidTransform::trans_x(geo.connector_length);

  const int n2 = geo.elements_per_segment;
  const double pitch2 = q.q5 / n2;
  for (int k = 0; k < n2; ++k) bend(pitch2, 4, 1.0 / n2);

  frame = frame * RigidTransform::trans_x(geo.hinge_length) * RigidTransform::rot_x(-kHalfPi);
  record(5, 1.0, false, Vec3::UnitZ());
  return frame;
}

ComponentPoses forward_kinematics(const JointConfig& q, const GeometryParams& geo, const JointLimits& limits) {
  limits.validate(q);
  const int modules = geo.elements_per_segment / 2;
  distribute_segment_bend(q.q3, modules, limits.per_slit_limit);
  distribute_segment_bend(q.q4, modules, limits.per_slit_limit);
  distribute_segment_bend(q.q5, geo.elements_per_segment, limits.per_slit_limit);

  ComponentPoses poses;
  poses.hinge = walk_chain(q, geo);
  const RigidTransform jaw_offset = RigidTransform::trans_x(geo.jaw_length);
  poses.jaw1 = poses.hinge * RigidTransform::rot_z(q.q6) * jaw_offset;
  poses.jaw2 = poses.hinge * RigidTransform::rot_z(q.q7) * jaw_offset;
  poses.tcp = tcp_from_jaws(poses.jaw1, poses.jaw2, geo.jaw_length);
  return poses;
}

RigidTransform tcp_from_jaws(const RigidTransform& jaw1, const RigidTransform& jaw2, double jaw_length) {
  const Vec3 u1 = jaw1.rotation.rotate(Vec3::UnitX());
  const Vec3 u2 = jaw2.rotation.rotate(Vec3::UnitX());
  const double c = u1.dot(u2);
  if (c <= -1.0 + 1e-9) throw Error(ErrorCode::DegenerateJaws, "jaw approach axes are anti-parallel");
  const Vec3 normal = u2.cross(u1);
  const double s = normal.norm();
  const double theta = std::atan2(s, c);

  // Half-angle rotation carrying jaw 2 toward jaw 1. For jaws that share a
  // hinge axis this is R_jaw2 * Rz(theta / 2).
  UnitQuaternion rotation = jaw2.rotation;
  if (s > 0.0) rotation = UnitQuaternion::about_axis(normal / s, theta / 2.0) * jaw2.rotation;

  const Vec3 mid = 0.5 * (jaw1.translation + jaw2.translation);
  const Vec3 offset = rotation.rotate(Vec3::UnitX()) * (jaw_length * (1.0 - std::cos(theta / 2.0)));
  return {rotation, mid + offset};
}

}  // namespace cmvs
