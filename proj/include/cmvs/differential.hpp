#pragma once

#include <vector>

#include "cmvs/error.hpp"
#include "cmvs/kinematics.hpp"

namespace cmvs {

/// Rows (v; omega) in the base frame, columns (q1, q2, q3, q4, q5, r).
using JacobianMatrix = Mat6;

/// TCP position (mm) followed by its rotation vector (rad), base frame.
using TaskVector = Vec6;

TaskVector task_vector(const RigidTransform& pose);
RigidTransform pose_from_task_vector(const TaskVector& x);

/// (p_target - p, log(R_target R^T)): the correction that carries `current`
/// onto `target`, both halves in the base frame.
Vec6 pose_residual(const RigidTransform& target, const RigidTransform& current);

JacobianMatrix geometric_jacobian(const JointConfig& q, const GeometryParams& geo,
                                  const JointLimits& limits = JointLimits::mechanism());

/// Central-difference oracle for geometric_jacobian; step in (0, 1e-3].
JacobianMatrix finite_difference_jacobian(const JointConfig& q, const GeometryParams& geo, double step,
                                          const JointLimits& limits = JointLimits::mechanism());

/// SVD pseudoinverse with Tikhonov damping: sigma / (sigma^2 + lambda^2).
Mat6 damped_pseudoinverse(const Mat6& jacobian, double damping);

struct IkOptions {
  double tol_pos = 1e-3;  // mm
  double tol_rot = 1e-4;  // rad
  int max_iters = 200;
  double damping = 1e-3;
  int max_halvings = 5;
  /// Length (mm) that converts the rotation residual into the merit function.
  double rotation_weight = 50.0;
};

struct IkResult {
  JointConfig q;
  int iterations = 0;
  double pos_residual = 0;
  double rot_residual = 0;
  /// Weighted residual norm at every accepted iterate.
  std::vector<double> residual_trace;
};

class IkNotConverged : public Error {
 public:
  explicit IkNotConverged(IkResult best_so_far);
  const IkResult& best() const { return best_; }

 private:
  IkResult best_;
};

/// Newton-Raphson with the damped pseudoinverse. The jaw opening of q0 is
/// held fixed; the solver moves (q1..q5, r) only and clamps every update to
/// the joint limits. Throws IkNotConverged or JointLimitViolation (q0).
IkResult solve_ik(const RigidTransform& target, const JointConfig& q0, const GeometryParams& geo,
                  const IkOptions& opts = {}, const JointLimits& limits = JointLimits::mechanism());

IkResult solve_ik(const TaskVector& x_d, const JointConfig& q0, const GeometryParams& geo,
                  const IkOptions& opts = {}, const JointLimits& limits = JointLimits::mechanism());

}  // namespace cmvs
