#include "cmvs/se3.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Eigenvalues>

#include "cmvs/error.hpp"

namespace cmvs {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::AngleAtSingularity: return "AngleAtSingularity";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::JointLimitViolation: return "JointLimitViolation";
    case ErrorCode::DegenerateJaws: return "DegenerateJaws";
    case ErrorCode::BendLimitExceeded: return "BendLimitExceeded";
    case ErrorCode::MaxIterations: return "MaxIterations";
    case ErrorCode::BehindCamera: return "BehindCamera";
    case ErrorCode::DepthOutOfRange: return "DepthOutOfRange";
    case ErrorCode::SamplingExhausted: return "SamplingExhausted";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::SchemaVersionMismatch: return "SchemaVersionMismatch";
    case ErrorCode::ResolutionMismatch: return "ResolutionMismatch";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

namespace {

constexpr double kTaylorThreshold = 1e-4;
// Higher-order coefficients of the SE(3) Jacobian lose precision much
// earlier than the Rodrigues terms; they switch to series below this.
constexpr double kSeriesThreshold = 1e-2;
constexpr double kSingularityMargin = 1e-6;

}  // namespace

UnitQuaternion::UnitQuaternion(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  // Collapse the double cover; ties at w == 0 break on the first non-zero
  // vector component.
  bool flip = w < 0.0;
  if (w == 0.0) {
    if (x != 0.0) flip = x < 0.0;
    else if (y != 0.0) flip = y < 0.0;
    else flip = z < 0.0;
  }
  if (flip) {
    w = -w;
    x = -x;
    y = -y;
    z = -z;
  }
  w_ = w;
  x_ = x;
  y_ = y;
  z_ = z;
}

UnitQuaternion::UnitQuaternion(const Eigen::Quaterniond& q) : UnitQuaternion(q.w(), q.x(), q.y(), q.z()) {}

UnitQuaternion UnitQuaternion::from_matrix(const Mat3& rotation) {
  return UnitQuaternion(Eigen::Quaterniond(rotation));
}

UnitQuaternion UnitQuaternion::from_rotation_vector(const Vec3& phi) {
  const double theta = phi.norm();
  const double half = 0.5 * theta;
  const double k = theta < kTaylorThreshold ? 0.5 - theta * theta / 48.0 : std::sin(half) / theta;
  return {std::cos(half), k * phi.x(), k * phi.y(), k * phi.z()};
}

UnitQuaternion UnitQuaternion::from_stored(double w, double x, double y, double z) {
  const double n2 = w * w + x * x + y * y + z * z;
  if (w > 0.0 && std::abs(n2 - 1.0) < 1e-12) {
    UnitQuaternion q;
    q.w_ = w;
    q.x_ = x;
    q.y_ = y;
    q.z_ = z;
    return q;
  }
  return {w, x, y, z};
}

UnitQuaternion UnitQuaternion::about_axis(const Vec3& axis, double angle) {
  return from_rotation_vector(axis.normalized() * angle);
}

Mat3 UnitQuaternion::matrix() const {
  return Eigen::Quaterniond(w_, x_, y_, z_).toRotationMatrix();
}

UnitQuaternion UnitQuaternion::operator*(const UnitQuaternion& r) const {
  return {w_ * r.w_ - x_ * r.x_ - y_ * r.y_ - z_ * r.z_,
          w_ * r.x_ + x_ * r.w_ + y_ * r.z_ - z_ * r.y_,
          w_ * r.y_ - x_ * r.z_ + y_ * r.w_ + z_ * r.x_,
          w_ * r.z_ + x_ * r.y_ - y_ * r.x_ + z_ * r.w_};
}

Vec3 UnitQuaternion::rotation_vector() const {
  const Vec3 v = vec();
  const double s = v.norm();
  if (s < 1e-8) {
    // angle = 2 atan(s / w); the first-order term is exact to O(s^3).
    return (2.0 / w_) * v;
  }
  return v * (2.0 * std::atan2(s, w_) / s);
}

double UnitQuaternion::angle() const { return 2.0 * std::atan2(vec().norm(), w_); }

RigidTransform RigidTransform::from_matrix(const Mat4& m) {
  return {UnitQuaternion::from_matrix(m.topLeftCorner<3, 3>()), m.topRightCorner<3, 1>()};
}

RigidTransform RigidTransform::rot_x(double angle) {
  return from_rotation(UnitQuaternion(std::cos(angle / 2), std::sin(angle / 2), 0, 0));
}

RigidTransform RigidTransform::rot_y(double angle) {
  return from_rotation(UnitQuaternion(std::cos(angle / 2), 0, std::sin(angle / 2), 0));
}

RigidTransform RigidTransform::rot_z(double angle) {
  return from_rotation(UnitQuaternion(std::cos(angle / 2), 0, 0, std::sin(angle / 2)));
}

RigidTransform RigidTransform::trans_x(double distance) { return from_translation(Vec3(distance, 0, 0)); }

RigidTransform RigidTransform::operator*(const RigidTransform& rhs) const {
  return {rotation * rhs.rotation, rotation.rotate(rhs.translation) + translation};
}

RigidTransform RigidTransform::inverse() const {
  const UnitQuaternion inv = rotation.conjugate();
  return {inv, -inv.rotate(translation)};
}

Mat4 RigidTransform::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation.matrix();
  m.topRightCorner<3, 1>() = translation;
  return m;
}

Vec6 Twist::vector() const {
  Vec6 v;
  v << rho, phi;
  return v;
}

Twist Twist::from_vector(const Vec6& v) { return {v.head<3>(), v.tail<3>()}; }

Mat3 skew(const Vec3& v) {
  Mat3 k;
  k << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return k;
}

Mat3 so3_exp(const Vec3& phi) { return UnitQuaternion::from_rotation_vector(phi).matrix(); }

Vec3 so3_log(const Mat3& rotation) { return UnitQuaternion::from_matrix(rotation).rotation_vector(); }

Mat3 so3_left_jacobian(const Vec3& phi) {
  const double t = phi.norm();
  const Mat3 k = skew(phi);
  double b, c;
  if (t < kTaylorThreshold) {
    b = 0.5 - t * t / 24.0;
    c = 1.0 / 6.0 - t * t / 120.0;
  } else {
    b = (1.0 - std::cos(t)) / (t * t);
    c = (t - std::sin(t)) / (t * t * t);
  }
  return Mat3::Identity() + b * k + c * k * k;
}

Mat3 so3_left_jacobian_inverse(const Vec3& phi) {
  const double t = phi.norm();
  const Mat3 k = skew(phi);
  double d;
  if (t < kTaylorThreshold) {
    d = 1.0 / 12.0 + t * t / 720.0;
  } else {
    d = (1.0 - t * std::sin(t) / (2.0 * (1.0 - std::cos(t)))) / (t * t);
  }
  return Mat3::Identity() - 0.5 * k + d * k * k;
}

RigidTransform se3_exp(const Twist& xi) {
  return {UnitQuaternion::from_rotation_vector(xi.phi), so3_left_jacobian(xi.phi) * xi.rho};
}

Twist se3_log(const RigidTransform& transform) {
  const double angle = transform.rotation.angle();
  if (angle > std::numbers::pi - kSingularityMargin) {
    throw Error(ErrorCode::AngleAtSingularity, "rotation angle " + std::to_string(angle) + " rad is at pi");
  }
  const Vec3 phi = transform.rotation.rotation_vector();
  return {so3_left_jacobian_inverse(phi) * transform.translation, phi};
}

namespace {

Mat3 se3_q_block(const Vec3& rho, const Vec3& phi) {
  const double t = phi.norm();
  const Mat3 r = skew(rho);
  const Mat3 p = skew(phi);
  double c1, c2, c3;
  if (t < kSeriesThreshold) {
    const double t2 = t * t;
    const double t4 = t2 * t2;
    c1 = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0;
    c2 = 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0;
    const double c5 = -1.0 / 120.0 + t2 / 5040.0 - t4 / 362880.0;
    c3 = 0.5 * (c2 - 3.0 * c5);
  } else {
    const double t2 = t * t;
    const double s = std::sin(t);
    const double c = std::cos(t);
    c1 = (t - s) / (t2 * t);
    c2 = (t2 / 2.0 + c - 1.0) / (t2 * t2);
    c3 = 0.5 * (c2 + 3.0 * (t - s - t2 * t / 6.0) / (t2 * t2 * t));
  }
  return 0.5 * r + c1 * (p * r + r * p + p * r * p) + c2 * (p * p * r + r * p * p - 3.0 * p * r * p) +
         c3 * (p * r * p * p + p * p * r * p);
}

}  // namespace

Mat6 se3_left_jacobian(const Twist& xi) {
  Mat6 j = Mat6::Zero();
  const Mat3 jr = so3_left_jacobian(xi.phi);
  j.topLeftCorner<3, 3>() = jr;
  j.bottomRightCorner<3, 3>() = jr;
  j.topRightCorner<3, 3>() = se3_q_block(xi.rho, xi.phi);
  return j;
}

Mat6 se3_left_jacobian_inverse(const Twist& xi) {
  Mat6 j = Mat6::Zero();
  const Mat3 ji = so3_left_jacobian_inverse(xi.phi);
  j.topLeftCorner<3, 3>() = ji;
  j.bottomRightCorner<3, 3>() = ji;
  j.topRightCorner<3, 3>() = -ji * se3_q_block(xi.rho, xi.phi) * ji;
  return j;
}

UnitQuaternion quaternion_average(std::span<const UnitQuaternion> qs) {
  if (qs.empty()) throw Error(ErrorCode::EmptyInput, "quaternion_average needs at least one rotation");
  Eigen::Matrix4d acc = Eigen::Matrix4d::Zero();
  for (const auto& q : qs) {
    const Eigen::Vector4d v = q.wxyz();
    acc += v * v.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> solver(acc);
  const Eigen::Vector4d best = solver.eigenvectors().col(3);
  return {best(0), best(1), best(2), best(3)};
}

double rotation_error_deg(const UnitQuaternion& qa, const UnitQuaternion& qb) {
  // Relative rotation qa^-1 * qb written out so that swapping the arguments
  // negates the vector part bit-for-bit.
  const double w = qa.w() * qb.w() + (qa.x() * qb.x() + qa.y() * qb.y() + qa.z() * qb.z());
  const double vx = (qa.w() * qb.x() - qb.w() * qa.x()) - (qa.y() * qb.z() - qa.z() * qb.y());
  const double vy = (qa.w() * qb.y() - qb.w() * qa.y()) - (qa.z() * qb.x() - qa.x() * qb.z());
  const double vz = (qa.w() * qb.z() - qb.w() * qa.z()) - (qa.x() * qb.y() - qa.y() * qb.x());
  const double s = std::sqrt(vx * vx + vy * vy + vz * vz);
  return rad2deg(2.0 * std::atan2(s, std::abs(w)));
}

double rad2deg(double rad) { return rad * 180.0 / std::numbers::pi; }
double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }

}  // namespace cmvs
