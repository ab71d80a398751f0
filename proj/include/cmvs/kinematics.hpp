#pragma once

#include <array>
#include <vector>

#include "cmvs/se3.hpp"

namespace cmvs {

/// Actuated variables. q1 in mm, everything else in rad.
/// q1 axial translation, q2 base roll, q3/q4 segment-1 pitch/yaw,
/// q5 segment-2 pitch, q6/q7 jaw yaws.
struct JointConfig {
  double q1 = 0, q2 = 0, q3 = 0, q4 = 0, q5 = 0, q6 = 0, q7 = 0;

  /// Equivalent gripper yaw (q6 + q7) / 2.
  double r() const { return 0.5 * (q6 + q7); }
  double opening() const { return q6 - q7; }

  /// Task variables (q1, q2, q3, q4, q5, r).
  Vec6 task() const;
  static JointConfig from_task(const Vec6& task, double opening);

  std::array<double, 7> as_array() const { return {q1, q2, q3, q4, q5, q6, q7}; }
  static JointConfig from_array(const std::array<double, 7>& a);

  bool operator==(const JointConfig&) const = default;
};

struct Range {
  double min = 0;
  double max = 0;

  bool contains(double v, double tol = 1e-12) const { return v >= min - tol && v <= max + tol; }
  double clamp(double v) const { return v < min ? min : (v > max ? max : v); }
};

struct JointLimits {
  std::array<Range, 7> joints;
  int n_slit = 22;
  double per_slit_limit = 0.16;  // rad

  /// Mechanism limits: 30 mm insertion stroke, +-45 deg roll, +-60 deg elsewhere.
  static JointLimits mechanism();

  bool contains(const JointConfig& q) const;
  /// Throws JointLimitViolation naming the first offending joint.
  void validate(const JointConfig& q) const;
  /// Admissible interval of task variable i (0..5) for a fixed jaw opening.
  Range task_range(int i, double opening) const;
  Vec6 clamp_task(const Vec6& task, double opening) const;
};

/// Dimensions of the pseudo-rigid-body chain and the distal parts, mm.
struct GeometryParams {
  double element_length = 2.0;  // l
  double element_offset = 0.5;  // h
  int elements_per_segment = 22;
  double connector_length = 10.0;
  double hinge_length = 8.0;
  double jaw_length = 15.0;  // d
  double hinge_radius = 2.0;
  double jaw_radius = 0.8;

  void validate() const;
  /// TCP distance from the base in the straight configuration with q1 = 0.
  double straight_length() const;
};

struct ComponentPoses {
  RigidTransform jaw1;
  RigidTransform jaw2;
  RigidTransform hinge;
  RigidTransform tcp;
};

/// Bending-induced translation of one PRB element; the theta -> 0 limit is l + h.
double prb_element_translation(double theta, const GeometryParams& geo);
double prb_element_translation_derivative(double theta, const GeometryParams& geo);

/// Single-plane element Rz(theta/2) Tx(Tr) Rz(theta/2).
RigidTransform prb_element_transform(double theta, const GeometryParams& geo);

/// Pitch-yaw module:
/// Rz(p/2) Tx(Tr(p)) Rz(p/2) Rx(-pi/2) Rz(y/2) Tx(Tr(y)) Rz(y/2) Rx(pi/2).
RigidTransform prb_module_transform(double theta_pitch, double theta_yaw, const GeometryParams& geo);

/// Equal split of a segment bend over its slits. Throws BendLimitExceeded.
std::vector<double> distribute_segment_bend(double theta_segment, int n_slit, double per_slit_limit);

/// One joint-dependent factor of the chain, expressed in the base frame.
/// For a revolute factor the TCP twist contribution is
/// weight * (axis x (p_tcp - point), axis); for a prismatic one weight * (axis, 0).
struct JointMotion {
  int task_index = 0;
  double weight = 1.0;
  bool prismatic = false;
  Vec3 axis = Vec3::UnitX();
  Vec3 point = Vec3::Zero();
};

/// Pose of the hinge frame (jaw pivot) and, optionally, every joint motion
/// encountered on the way there. Does not check limits.
RigidTransform walk_chain(const JointConfig& q, const GeometryParams& geo, std::vector<JointMotion>* motions = nullptr);

/// Base-frame poses of both jaws, hinge and TCP. Throws JointLimitViolation
/// or BendLimitExceeded.
ComponentPoses forward_kinematics(const JointConfig& q, const GeometryParams& geo,
                                  const JointLimits& limits = JointLimits::mechanism());

/// TCP at the midpoint of the arc swept by the jaw tips. Jaw frames sit at
/// the jaw tips with +x along the jaw. Throws DegenerateJaws when the jaws
/// are anti-parallel.
RigidTransform tcp_from_jaws(const RigidTransform& jaw1, const RigidTransform& jaw2, double jaw_length);

}  // namespace cmvs
