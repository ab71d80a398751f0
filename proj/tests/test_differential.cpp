#include <doctest.h>

#include <chrono>
#include <cmath>

#include "cmvs/differential.hpp"
#include "cmvs/error.hpp"
#include "test_support.hpp"

using namespace cmvs;
using cmvs::testing::random_joint_config;

namespace {

double relative_frobenius(const Mat6& a, const Mat6& b) { return (a - b).norm() / b.norm(); }

}  // namespace

TEST_CASE("straight-configuration Jacobian columns") {
  GeometryParams geo;
  JointConfig q;
  const JacobianMatrix j = geometric_jacobian(q, geo);
  // q1 translates along the shaft
  CHECK((j.col(0) - (Vec6() << 1, 0, 0, 0, 0, 0).finished()).norm() < 1e-12);
  // q2 rolls about the shaft without moving an on-axis TCP
  CHECK((j.col(1) - (Vec6() << 0, 0, 0, 1, 0, 0).finished()).norm() < 1e-12);
  // segment-2 pitch: rotation about z, tip moves along +y
  CHECK(j(5, 4) == doctest::Approx(1.0));
  CHECK(j(1, 4) > 0.0);
  // gripper yaw about the hinge axis, lever = jaw length
  CHECK(std::abs(j.col(5).tail<3>().norm() - 1.0) < 1e-12);
  CHECK(j.col(5).head<3>().norm() == doctest::Approx(geo.jaw_length));
  Eigen::JacobiSVD<Mat6> svd(j);
  CHECK(svd.singularValues()(5) > 1e-3);
}

TEST_CASE("analytic Jacobian agrees with central differences") {
  GeometryParams geo;
  std::mt19937_64 rng(31);
  for (int i = 0; i < 100; ++i) {
    const JointConfig q = random_joint_config(rng);
    CHECK(relative_frobenius(geometric_jacobian(q, geo), finite_difference_jacobian(q, geo, 1e-6)) < 1e-5);
  }
  CHECK_THROWS_AS(finite_difference_jacobian(JointConfig{}, geo, 0.0), Error);
  CHECK_THROWS_AS(finite_difference_jacobian(JointConfig{}, geo, 2e-3), Error);
}

TEST_CASE("central differences converge at second order") {
  GeometryParams geo;
  std::mt19937_64 rng(32);
  const JointConfig q = random_joint_config(rng);
  const Mat6 analytic = geometric_jacobian(q, geo);
  const double e1 = (finite_difference_jacobian(q, geo, 1e-3) - analytic).norm();
  const double e2 = (finite_difference_jacobian(q, geo, 5e-4) - analytic).norm();
  CHECK(e2 < 0.5 * e1);
}

TEST_CASE("finite differences work at the joint limits") {
  GeometryParams geo;
  JointConfig q;
  q.q1 = 30.0;
  q.q3 = deg2rad(60.0);
  q.q6 = deg2rad(60.0);
  q.q7 = deg2rad(40.0);
  CHECK(relative_frobenius(geometric_jacobian(q, geo), finite_difference_jacobian(q, geo, 1e-6)) < 1e-5);
}

TEST_CASE("damped pseudoinverse") {
  std::mt19937_64 rng(33);
  std::normal_distribution<double> n(0, 1);
  Mat6 a;
  for (int i = 0; i < 36; ++i) a(i) = n(rng);
  CHECK((damped_pseudoinverse(a, 0.0) * a - Mat6::Identity()).norm() < 1e-9);
  const Mat6 zero = Mat6::Zero();
  CHECK(damped_pseudoinverse(zero, 1e-3).norm() == 0.0);
}

TEST_CASE("pose_residual applied as a correction reaches the target") {
  std::mt19937_64 rng(34);
  for (int i = 0; i < 100; ++i) {
    const RigidTransform a = cmvs::testing::random_transform(rng, 50, 2.5);
    const RigidTransform b = cmvs::testing::random_transform(rng, 50, 2.5);
    const Vec6 e = pose_residual(a, b);
    const RigidTransform corrected{UnitQuaternion::from_rotation_vector(e.tail<3>()) * b.rotation,
                                   b.translation + e.head<3>()};
    CHECK(pose_residual(a, corrected).norm() < 1e-9);
  }
}

TEST_CASE("IK round trip from the zero configuration") {
  GeometryParams geo;
  std::mt19937_64 rng(35);
  const auto start = std::chrono::steady_clock::now();
  int converged = 0;
  for (int i = 0; i < 100; ++i) {
    const JointConfig truth = random_joint_config(rng);
    const RigidTransform target = forward_kinematics(truth, geo).tcp;
    JointConfig q0;
    q0.q6 = 0.5 * truth.opening();
    q0.q7 = -0.5 * truth.opening();
    try {
      const IkResult res = solve_ik(target, q0, geo);
      CHECK(res.iterations <= 200);
      const Vec6 e = pose_residual(target, forward_kinematics(res.q, geo).tcp);
      CHECK(e.head<3>().norm() < 1e-3);
      CHECK(e.tail<3>().norm() < 1e-4);
      CHECK(res.q.opening() == doctest::Approx(truth.opening()));
      ++converged;
    } catch (const IkNotConverged& ex) {
      FAIL_CHECK("IK failed: " << std::string(ex.what()));
    }
  }
  CHECK(converged == 100);
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() < 10.0);
}

TEST_CASE("IK at the solution returns immediately") {
  GeometryParams geo;
  std::mt19937_64 rng(36);
  const JointConfig q = random_joint_config(rng);
  const IkResult res = solve_ik(forward_kinematics(q, geo).tcp, q, geo);
  CHECK(res.iterations == 0);
  CHECK(res.q == q);
}

TEST_CASE("unreachable target reports MaxIterations with a non-increasing trace") {
  GeometryParams geo;
  const RigidTransform target = RigidTransform::from_translation(Vec3(143.0 + 200.0, 0, 0));
  try {
    solve_ik(target, JointConfig{}, geo);
    FAIL("expected IkNotConverged");
  } catch (const IkNotConverged& e) {
    CHECK(e.code() == ErrorCode::MaxIterations);
    const auto& trace = e.best().residual_trace;
    REQUIRE(!trace.empty());
    for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1]);
    CHECK(e.best().pos_residual > 100.0);
  }
}

TEST_CASE("IK solution varies continuously with the target") {
  GeometryParams geo;
  IkOptions tight;
  tight.tol_pos = 1e-7;
  tight.tol_rot = 1e-8;
  std::mt19937_64 rng(37);
  for (int i = 0; i < 20; ++i) {
    // keep clear of the limits so both targets are reachable
    const JointConfig q = JointConfig::from_task(0.8 * random_joint_config(rng).task(), deg2rad(20.0));
    const RigidTransform target = forward_kinematics(q, geo).tcp;
    const Vec3 delta(0.5, -0.3, 0.2);
    const IkResult far = solve_ik(RigidTransform{target.rotation, target.translation + delta}, q, geo, tight);
    const IkResult near = solve_ik(RigidTransform{target.rotation, target.translation + 0.1 * delta}, q, geo, tight);
    const double d_far = (far.q.task() - q.task()).norm();
    const double d_near = (near.q.task() - q.task()).norm();
    CHECK(d_near < 0.2 * d_far + 1e-6);
  }
}

TEST_CASE("task-vector overload matches the pose overload") {
  GeometryParams geo;
  std::mt19937_64 rng(38);
  const JointConfig q = random_joint_config(rng);
  const RigidTransform target = forward_kinematics(q, geo).tcp;
  JointConfig q0;
  q0.q6 = 0.5 * q.opening();
  q0.q7 = -0.5 * q.opening();
  const IkResult a = solve_ik(target, q0, geo);
  const IkResult b = solve_ik(task_vector(target), q0, geo);
  CHECK((a.q.task() - b.q.task()).norm() < 1e-9);
}
