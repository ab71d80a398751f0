#pragma once

#include <span>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace cmvs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat6 = Eigen::Matrix<double, 6, 6>;

/// Unit quaternion stored as (w, x, y, z) with w >= 0. Every constructor
/// renormalizes and collapses the antipodal representative.
class UnitQuaternion {
 public:
  UnitQuaternion() = default;
  UnitQuaternion(double w, double x, double y, double z);
  explicit UnitQuaternion(const Eigen::Quaterniond& q);

  static UnitQuaternion identity() { return {}; }
  static UnitQuaternion from_matrix(const Mat3& rotation);
  static UnitQuaternion from_rotation_vector(const Vec3& phi);
  static UnitQuaternion about_axis(const Vec3& axis, double angle);
  /// Keeps the coefficients bit-for-bit when they already form a canonical
  /// unit quaternion (deserialization); otherwise normalizes as usual.
  static UnitQuaternion from_stored(double w, double x, double y, double z);

  double w() const { return w_; }
  double x() const { return x_; }
  double y() const { return y_; }
  double z() const { return z_; }
  Vec3 vec() const { return {x_, y_, z_}; }
  Eigen::Vector4d wxyz() const { return {w_, x_, y_, z_}; }

  Mat3 matrix() const;
  Vec3 rotate(const Vec3& v) const { return matrix() * v; }
  UnitQuaternion conjugate() const { return {w_, -x_, -y_, -z_}; }
  UnitQuaternion operator*(const UnitQuaternion& rhs) const;

  /// Rotation vector (axis * angle), angle in [0, pi].
  Vec3 rotation_vector() const;
  double angle() const;

  bool operator==(const UnitQuaternion&) const = default;

 private:
  double w_ = 1.0, x_ = 0.0, y_ = 0.0, z_ = 0.0;
};

/// SE(3) element. Translation in millimetres.
struct RigidTransform {
  UnitQuaternion rotation;
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from_translation(const Vec3& t) { return {UnitQuaternion{}, t}; }
  static RigidTransform from_rotation(const UnitQuaternion& q) { return {q, Vec3::Zero()}; }
  static RigidTransform from_matrix(const Mat4& m);
  static RigidTransform rot_x(double angle);
  static RigidTransform rot_y(double angle);
  static RigidTransform rot_z(double angle);
  static RigidTransform trans_x(double distance);

  RigidTransform operator*(const RigidTransform& rhs) const;
  RigidTransform inverse() const;
  Vec3 apply(const Vec3& p) const { return rotation.rotate(p) + translation; }
  Mat3 rotation_matrix() const { return rotation.matrix(); }
  Mat4 matrix() const;

  bool operator==(const RigidTransform&) const = default;
};

/// se(3) coordinates: rho (mm) first, phi (rad) second.
struct Twist {
  Vec3 rho = Vec3::Zero();
  Vec3 phi = Vec3::Zero();

  Vec6 vector() const;
  static Twist from_vector(const Vec6& v);
};

Mat3 skew(const Vec3& v);

Mat3 so3_exp(const Vec3& phi);
Vec3 so3_log(const Mat3& rotation);
Mat3 so3_left_jacobian(const Vec3& phi);
Mat3 so3_left_jacobian_inverse(const Vec3& phi);

RigidTransform se3_exp(const Twist& xi);

/// Throws AngleAtSingularity when the rotation angle is within 1e-6 of pi.
Twist se3_log(const RigidTransform& transform);

/// log(exp(eps) * T) ~= log(T) + J_l^{-1}(log T) * eps, in (rho, phi) order.
Mat6 se3_left_jacobian(const Twist& xi);
Mat6 se3_left_jacobian_inverse(const Twist& xi);

/// Eigenvector of the largest eigenvalue of sum(q q^T). Throws EmptyInput.
UnitQuaternion quaternion_average(std::span<const UnitQuaternion> qs);

/// Geodesic angle between two rotations, degrees in [0, 180]; exactly symmetric.
double rotation_error_deg(const UnitQuaternion& qa, const UnitQuaternion& qb);

double rad2deg(double rad);
double deg2rad(double deg);

}  // namespace cmvs
