#include "cmvs/differential.hpp"

#include <cmath>
#include <array>
#include <limits>
#include <string>

#include <Eigen/SVD>

namespace cmvs {

TaskVector task_vector(const RigidTransform& pose) {
  TaskVector x;
  x << pose.translation, pose.rotation.rotation_vector();
  return x;
}

RigidTransform pose_from_task_vector(const TaskVector& x) {
  return {UnitQuaternion::from_rotation_vector(x.tail<3>()), x.head<3>()};
}

Vec6 pose_residual(const RigidTransform& target, const RigidTransform& current) {
  Vec6 e;
  e << target.translation - current.translation, (target.rotation * current.rotation.conjugate()).rotation_vector();
  return e;
}

JacobianMatrix geometric_jacobian(const JointConfig& q, const GeometryParams& geo, const JointLimits& limits) {
  const Vec3 tcp = forward_kinematics(q, geo, limits).tcp.translation;
  std::vector<JointMotion> motions;
  motions.reserve(8 * static_cast<std::size_t>(geo.elements_per_segment) + 4);
  walk_chain(q, geo, &motions);

  JacobianMatrix jac = JacobianMatrix::Zero();
  for (const auto& m : motions) {
    if (m.prismatic) {
      jac.block<3, 1>(0, m.task_index) += m.weight * m.axis;
    } else {
      jac.block<3, 1>(0, m.task_index) += m.weight * m.axis.cross(tcp - m.point);
      jac.block<3, 1>(3, m.task_index) += m.weight * m.axis;
    }
  }
  return jac;
}

JacobianMatrix finite_difference_jacobian(const JointConfig& q, const GeometryParams& geo, double step,
                                          const JointLimits& limits) {
  if (!(step > 0.0 && step <= 1e-3)) throw Error(ErrorCode::InvalidConfig, "finite-difference step must lie in (0, 1e-3]");
  limits.validate(q);
  // Perturbed configurations may straddle a limit by one step.
  JointLimits relaxed = limits;
  for (auto& r : relaxed.joints) r = {-std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  relaxed.per_slit_limit = std::numeric_limits<double>::infinity();

  const Vec6 x = q.task();
  const double opening = q.opening();
  JacobianMatrix jac;
  for (int j = 0; j < 6; ++j) {
    Vec6 plus = x, minus = x;
    plus(j) += step;
    minus(j) -= step;
    const RigidTransform tp = forward_kinematics(JointConfig::from_task(plus, opening), geo, relaxed).tcp;
    const RigidTransform tm = forward_kinematics(JointConfig::from_task(minus, opening), geo, relaxed).tcp;
    jac.block<3, 1>(0, j) = (tp.translation - tm.translation) / (2.0 * step);
    jac.block<3, 1>(3, j) = (tp.rotation * tm.rotation.conjugate()).rotation_vector() / (2.0 * step);
  }
  return jac;
}

Mat6 damped_pseudoinverse(const Mat6& jacobian, double damping) {
  Eigen::JacobiSVD<Mat6> svd(jacobian, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec6 s = svd.singularValues();
  Vec6 inv;
  for (int i = 0; i < 6; ++i) inv(i) = s(i) / (s(i) * s(i) + damping * damping);
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

namespace {

// Damped least-squares step. Joints already resting on a limit and pushed
// further out are frozen and the step is re-solved for the others.
Vec6 limited_step(const Mat6& jac, const Vec6& err, const Vec6& x, double opening, const JointLimits& limits,
                  double damping) {
  Mat6 j = jac;
  std::array<bool, 6> frozen{};
  Vec6 dx = damped_pseudoinverse(j, damping) * err;
  for (int round = 0; round < 6; ++round) {
    bool changed = false;
    for (int i = 0; i < 6; ++i) {
      const Range r = limits.task_range(i, opening);
      const bool at_max = x(i) >= r.max - 1e-9 && dx(i) > 0.0;
      const bool at_min = x(i) <= r.min + 1e-9 && dx(i) < 0.0;
      if (!frozen[i] && (at_max || at_min)) {
        frozen[i] = true;
        j.col(i).setZero();
        changed = true;
      }
    }
    if (!changed) break;
    dx = damped_pseudoinverse(j, damping) * err;
  }
  for (int i = 0; i < 6; ++i) {
    if (frozen[i]) dx(i) = 0.0;
  }
  return dx;
}

}  // namespace

IkNotConverged::IkNotConverged(IkResult best_so_far)
    : Error(ErrorCode::MaxIterations, "inverse kinematics did not converge after " +
                                          std::to_string(best_so_far.iterations) + " iterations (residual " +
                                          std::to_string(best_so_far.pos_residual) + " mm, " +
                                          std::to_string(best_so_far.rot_residual) + " rad)"),
      best_(std::move(best_so_far)) {}

IkResult solve_ik(const RigidTransform& target, const JointConfig& q0, const GeometryParams& geo,
                  const IkOptions& opts, const JointLimits& limits) {
  limits.validate(q0);
  const double opening = q0.opening();

  IkResult result;
  result.q = q0;
  Vec6 x = q0.task();
  Vec6 w = Vec6::Ones();
  w.tail<3>().setConstant(opts.rotation_weight);
  Vec6 err = pose_residual(target, forward_kinematics(q0, geo, limits).tcp);
  double norm = w.cwiseProduct(err).norm();
  result.residual_trace.push_back(norm);

  auto finish = [&](bool converged) {
    result.pos_residual = err.head<3>().norm();
    result.rot_residual = err.tail<3>().norm();
    if (!converged) throw IkNotConverged(result);
    return result;
  };

  for (int it = 0; it < opts.max_iters; ++it) {
    if (err.head<3>().norm() < opts.tol_pos && err.tail<3>().norm() < opts.tol_rot) return finish(true);

    const JointConfig q = JointConfig::from_task(x, opening);
    const Vec6 dx = limited_step(w.asDiagonal() * geometric_jacobian(q, geo, limits), w.cwiseProduct(err), x, opening,
                                 limits, opts.damping);

    double scale = 1.0;
    bool accepted = false;
    for (int h = 0; h <= opts.max_halvings; ++h, scale *= 0.5) {
      const Vec6 candidate = limits.clamp_task(x + scale * dx, opening);
      const Vec6 cand_err = pose_residual(target, forward_kinematics(JointConfig::from_task(candidate, opening), geo, limits).tcp);
      const double cand_norm = w.cwiseProduct(cand_err).norm();
      if (cand_norm <= norm) {
        x = candidate;
        err = cand_err;
        norm = cand_norm;
        accepted = true;
        break;
      }
    }
    result.iterations = it + 1;
    result.q = JointConfig::from_task(x, opening);
    if (!accepted) return finish(false);  // stalled: no step reduces the residual
    result.residual_trace.push_back(norm);
  }
  if (err.head<3>().norm() < opts.tol_pos && err.tail<3>().norm() < opts.tol_rot) return finish(true);
  return finish(false);
}

IkResult solve_ik(const TaskVector& x_d, const JointConfig& q0, const GeometryParams& geo, const IkOptions& opts,
                  const JointLimits& limits) {
  return solve_ik(pose_from_task_vector(x_d), q0, geo, opts, limits);
}

}  // namespace cmvs
