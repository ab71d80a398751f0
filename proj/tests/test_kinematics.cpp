#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "cmvs/error.hpp"
#include "cmvs/kinematics.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace cmvs;
using cmvs::testing::pose_angle;
using cmvs::testing::pose_distance;
using cmvs::testing::random_joint_config;
using cmvs::testing::random_unit;
using cmvs::testing::arc_sampling_midpoint;
using cmvs::testing::arc_tip;
using cmvs::testing::frame_with_x;

namespace {

Mat4 hom_rz(double a) {
  Mat4 m = Mat4::Identity();
  m(0, 0) = std::cos(a);
  m(0, 1) = -std::sin(a);
  m(1, 0) = std::sin(a);
  m(1, 1) = std::cos(a);
  return m;
}

Mat4 hom_rx(double a) {
  Mat4 m = Mat4::Identity();
  m(1, 1) = std::cos(a);
  m(1, 2) = -std::sin(a);
  m(2, 1) = std::sin(a);
  m(2, 2) = std::cos(a);
  return m;
}

Mat4 hom_tx(double d) {
  Mat4 m = Mat4::Identity();
  m(0, 3) = d;
  return m;
}

double closed_form_tr(double theta, double l, double h) {
  return l * std::cos(theta / 2) + 2 * h / theta * std::sin(theta / 2);
}

Mat4 element_matrix(double theta, double l, double h) {
  return hom_rz(theta / 2) * hom_tx(closed_form_tr(theta, l, h)) * hom_rz(theta / 2);
}

}  // namespace

TEST_CASE("element translation tends to l + h and is continuous") {
  GeometryParams geo;
  CHECK(prb_element_translation(0.0, geo) == doctest::Approx(2.5).epsilon(1e-15));
  for (double t : {1e-8, 5e-5, 0.99e-4, 1.01e-4, 1e-3, 0.1, 0.16, -0.12}) {
    CHECK(std::abs(prb_element_translation(t, geo) - closed_form_tr(t, 2.0, 0.5)) < 1e-12);
  }
  // derivative against central differences of the closed form
  for (double t : {-0.15, -0.02, 0.003, 0.08, 0.16}) {
    const double h = 1e-6;
    const double fd = (closed_form_tr(t + h, 2, 0.5) - closed_form_tr(t - h, 2, 0.5)) / (2 * h);
    CHECK(std::abs(prb_element_translation_derivative(t, geo) - fd) < 1e-8);
  }
  CHECK(std::abs(prb_element_translation_derivative(2e-4, geo) + 0.5 * 2.0 * std::sin(1e-4) + 0.5 * 2e-4 / 12) < 1e-10);
}

TEST_CASE("pitch-yaw module matches the explicit 4x4 product") {
  GeometryParams geo;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-0.16, 0.16);
  for (int i = 0; i < 100; ++i) {
    const double p = u(rng), y = u(rng);
    const Mat4 oracle = element_matrix(p, 2, 0.5) * hom_rx(-std::numbers::pi / 2) * element_matrix(y, 2, 0.5) *
                        hom_rx(std::numbers::pi / 2);
    CHECK((prb_module_transform(p, y, geo).matrix() - oracle).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("module with zero yaw stays in the pitch plane") {
  GeometryParams geo;
  for (double p : {-0.15, -0.05, 0.07, 0.16}) {
    const RigidTransform m = prb_module_transform(p, 0.0, geo);
    CHECK(std::abs(m.translation.z()) < 1e-14);
    const Vec3 axis = m.rotation.rotation_vector();
    CHECK(std::abs(axis.x()) < 1e-14);
    CHECK(std::abs(axis.y()) < 1e-14);
    CHECK(axis.z() == doctest::Approx(p).epsilon(1e-12));
  }
}

TEST_CASE("straight configuration puts the TCP on the shaft axis") {
  GeometryParams geo;
  CHECK(geo.straight_length() == doctest::Approx(143.0));
  for (double q1 : {0.0, 4.5, 30.0}) {
    JointConfig q;
    q.q1 = q1;
    const ComponentPoses poses = forward_kinematics(q, geo);
    CHECK((poses.tcp.translation - Vec3(143.0 + q1, 0, 0)).norm() < 1e-9);
    CHECK((poses.hinge.translation - Vec3(128.0 + q1, 0, 0)).norm() < 1e-9);
    CHECK(poses.tcp.rotation.rotate(Vec3::UnitX()).x() == doctest::Approx(1.0));
  }
}

TEST_CASE("base roll rotates the whole tool about the shaft") {
  GeometryParams geo;
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (int i = 0; i < 100; ++i) {
    JointConfig q = random_joint_config(rng);
    q.q2 = u(rng);
    const double phi = u(rng);
    JointConfig rolled = q;
    rolled.q2 += phi;
    const RigidTransform expected = RigidTransform::rot_x(phi) * forward_kinematics(q, geo).tcp;
    const RigidTransform got = forward_kinematics(rolled, geo).tcp;
    CHECK(pose_distance(expected, got) < 1e-9);
    CHECK(pose_angle(expected, got) < 1e-9);
  }
}

TEST_CASE("pitch-only bends keep the TCP in the xy plane") {
  GeometryParams geo;
  std::mt19937_64 rng(9);
  for (int i = 0; i < 50; ++i) {
    JointConfig q = random_joint_config(rng);
    q.q2 = 0;
    q.q4 = 0;
    const double half = 0.5 * q.opening();
    q.q6 = half;
    q.q7 = -half;
    CHECK(std::abs(forward_kinematics(q, geo).tcp.translation.z()) < 1e-9);
  }
}

TEST_CASE("a 30 degree bend tracks the constant-curvature arc") {
  GeometryParams geo;
  const double theta = deg2rad(30.0);
  const double seg_length = geo.elements_per_segment * (geo.element_length + geo.element_offset);

  SUBCASE("segment 2 alone") {
    Mat4 chain = Mat4::Identity();
    for (int i = 0; i < 22; ++i) chain = chain * element_matrix(theta / 22, 2.0, 0.5);
    const Vec3 prb = chain.topRightCorner<3, 1>();
    const Vec3 arc = arc_tip(seg_length, theta);
    CHECK((prb - arc).norm() < 0.02 * arc.norm());
  }

  SUBCASE("segment 2 inside the full chain") {
    JointConfig q;
    q.q5 = theta;
    const RigidTransform tcp = forward_kinematics(q, geo).tcp;
    const Vec3 start(seg_length + geo.connector_length, 0, 0);
    const Vec3 tangent(std::cos(theta), std::sin(theta), 0);
    const Vec3 arc_end = start + arc_tip(seg_length, theta);
    const Vec3 oracle = arc_end + (geo.hinge_length + geo.jaw_length) * tangent;
    CHECK((tcp.translation - oracle).norm() < 0.02 * arc_tip(seg_length, theta).norm());
    CHECK((tcp.rotation.rotate(Vec3::UnitX()) - tangent).norm() < 1e-9);
  }

  SUBCASE("segment 1 pitch over its alternating slits") {
    JointConfig q;
    q.q3 = theta;
    const RigidTransform hinge = forward_kinematics(q, geo).hinge;
    // Back out the straight parts after the segment along the final tangent.
    const Vec3 tangent(std::cos(theta), std::sin(theta), 0);
    const Vec3 seg_end = hinge.translation - (geo.hinge_length + seg_length + geo.connector_length) * tangent;
    const Vec3 arc = arc_tip(seg_length, theta);
    CHECK((seg_end - arc).norm() < 0.02 * arc.norm());
  }
}

TEST_CASE("tcp_from_jaws") {
  SUBCASE("parallel jaws give the common tip") {
    const RigidTransform j = frame_with_x(Vec3(1, 2, 3), Vec3(0, 1, 0), Vec3(0, 0, 1));
    const RigidTransform tcp = tcp_from_jaws(j, j, 15.0);
    CHECK((tcp.translation - j.translation).norm() < 1e-12);
    CHECK(pose_angle(tcp, j) < 1e-12);
  }

  SUBCASE("symmetric opening in the hinge plane") {
    const double a = deg2rad(20.0);
    const RigidTransform j1 = RigidTransform::rot_z(a) * RigidTransform::trans_x(15.0);
    const RigidTransform j2 = RigidTransform::rot_z(-a) * RigidTransform::trans_x(15.0);
    const RigidTransform tcp = tcp_from_jaws(j1, j2, 15.0);
    CHECK((tcp.translation - Vec3(15, 0, 0)).norm() < 1e-12);
    CHECK(tcp.rotation.angle() < 1e-12);
  }

  SUBCASE("anti-parallel jaws are rejected") {
    const RigidTransform j1 = RigidTransform::trans_x(15.0);
    const RigidTransform j2 = RigidTransform::rot_z(std::numbers::pi) * RigidTransform::trans_x(15.0);
    CHECK_THROWS_AS(tcp_from_jaws(j1, j2, 15.0), Error);
  }

  SUBCASE("arc-sampling oracle and label swap") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> ang(0.0, deg2rad(150.0));
    for (int i = 0; i < 1000; ++i) {
      const Vec3 pivot = 50.0 * random_unit(rng);
      const Vec3 normal = random_unit(rng);
      const Vec3 ref = normal.unitOrthogonal();
      const double a1 = ang(rng), a2 = -ang(rng);
      const Vec3 u1 = Eigen::AngleAxisd(a1, normal) * ref;
      const Vec3 u2 = Eigen::AngleAxisd(a2, normal) * ref;
      const double d = 15.0;
      const RigidTransform j1 = frame_with_x(pivot + d * u1, u1, normal);
      const RigidTransform j2 = frame_with_x(pivot + d * u2, u2, normal);
      const Vec3 oracle = arc_sampling_midpoint(pivot, u1, u2, d, 10000);
      const RigidTransform tcp = tcp_from_jaws(j1, j2, d);
      CHECK((tcp.translation - oracle).norm() < 1e-3);
      const RigidTransform swapped = tcp_from_jaws(j2, j1, d);
      CHECK((swapped.translation - tcp.translation).norm() < 1e-9);
    }
  }
}

TEST_CASE("forward kinematics is internally consistent and deterministic") {
  GeometryParams geo;
  std::mt19937_64 rng(13);
  for (int i = 0; i < 200; ++i) {
    const JointConfig q = random_joint_config(rng);
    const ComponentPoses a = forward_kinematics(q, geo);
    const RigidTransform tcp = tcp_from_jaws(a.jaw1, a.jaw2, geo.jaw_length);
    CHECK(pose_distance(tcp, a.tcp) < 1e-9);
    CHECK(pose_angle(tcp, a.tcp) < 1e-9);
    // both jaws hinge about the same pivot
    CHECK((a.jaw1.translation - a.hinge.translation).norm() == doctest::Approx(geo.jaw_length));
    CHECK((a.jaw2.translation - a.hinge.translation).norm() == doctest::Approx(geo.jaw_length));
    const ComponentPoses b = forward_kinematics(q, geo);
    CHECK(a.tcp.matrix() == b.tcp.matrix());
    CHECK(a.jaw1.matrix() == b.jaw1.matrix());
  }
}

TEST_CASE("joint and bend limits") {
  GeometryParams geo;
  JointConfig q;
  q.q2 = deg2rad(50.0);
  try {
    forward_kinematics(q, geo);
    FAIL("expected JointLimitViolation");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::JointLimitViolation);
    CHECK(std::string(e.what()).find("q2") != std::string::npos);
  }

  JointLimits tight = JointLimits::mechanism();
  tight.per_slit_limit = 0.04;
  JointConfig bent;
  bent.q5 = 1.0;  // 1.0 / 22 > 0.04
  try {
    forward_kinematics(bent, geo, tight);
    FAIL("expected BendLimitExceeded");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BendLimitExceeded);
  }
  CHECK_NOTHROW(forward_kinematics(bent, geo));
}

TEST_CASE("distribute_segment_bend") {
  const auto even = distribute_segment_bend(0.22, 22, 0.16);
  REQUIRE(even.size() == 22);
  for (double v : even) CHECK(v == doctest::Approx(0.01));
  CHECK(distribute_segment_bend(-3.52, 22, 0.16).front() == doctest::Approx(-0.16));
  CHECK_THROWS_AS(distribute_segment_bend(3.6, 22, 0.16), Error);
  CHECK_THROWS_AS(distribute_segment_bend(0.1, 0, 0.16), Error);

  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(-3.5, 3.5);
  for (int i = 0; i < 100; ++i) {
    const double t = u(rng);
    double sum = 0;
    for (double v : distribute_segment_bend(t, 22, 0.16)) {
      CHECK(std::abs(v) <= 0.16);
      sum += v;
    }
    CHECK(sum == doctest::Approx(t).epsilon(1e-12));
  }
}

TEST_CASE("task variables round-trip through JointConfig") {
  std::mt19937_64 rng(15);
  for (int i = 0; i < 50; ++i) {
    const JointConfig q = random_joint_config(rng);
    const JointConfig back = JointConfig::from_task(q.task(), q.opening());
    for (int j = 0; j < 7; ++j) CHECK(back.as_array()[j] == doctest::Approx(q.as_array()[j]).epsilon(1e-14));
  }
}
