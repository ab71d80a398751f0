#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "cmvs/kinematics.hpp"
#include "cmvs/se3.hpp"

namespace cmvs {

/// Pinhole intrinsics. Pixel centres sit at integer coordinates, so a W-pixel
/// wide image spans u in [-0.5, W - 0.5].
struct CameraIntrinsics {
  double fx = 2100.0;
  double fy = 2100.0;
  double cx = 1023.5;
  double cy = 767.5;
  int width = 2048;
  int height = 1536;

  /// fx = fy = focal_length / pixel_pitch, principal point at the image centre.
  static CameraIntrinsics from_focal_length(double focal_length_mm, double pixel_pitch_mm, int width, int height);

  /// Same field of view resampled to width x height.
  CameraIntrinsics scaled(int new_width, int new_height) const;
  void validate() const;
  bool inside(const Vec2& uv) const;
};

struct StereoRig {
  CameraIntrinsics left;
  CameraIntrinsics right;
  /// Maps left-camera coordinates to right-camera coordinates.
  RigidTransform right_from_left = RigidTransform::from_translation(Vec3(-63.3, 0, 0));

  /// Rectified pair: identical intrinsics, right camera displaced by
  /// `baseline` along the left camera's +x.
  static StereoRig rectified(const CameraIntrinsics& cam, double baseline_mm);
  double baseline() const { return right_from_left.translation.norm(); }
  StereoRig scaled(int new_width, int new_height) const;
  void validate() const;
};

enum class PartClass : std::uint8_t { Background = 0, Jaw1 = 1, Jaw2 = 2, Hinge = 3 };

struct Keypoint {
  double x = 0;  // px
  double y = 0;  // px
  int rho = 0;   // visibility, 0 or 1
  bool operator==(const Keypoint&) const = default;
};

using KeypointSet = std::vector<Keypoint>;

struct KeypointLayout {
  struct Entry {
    PartClass part;
    Vec3 local;  // in the part's own frame
  };
  std::vector<Entry> entries;

  /// 28 points per jaw spaced uniformly along the jaw axis from 30% of the
  /// jaw length to the tip, then a 3 x 3 grid on the hinge (three stations
  /// behind the pivot, three lateral offsets across the hinge radius).
  static KeypointLayout standard(const GeometryParams& geo, int per_jaw = 28);
  std::size_t size() const { return entries.size(); }
};

/// Row-major class-index image.
struct PartMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> labels;

  PartMask() = default;
  PartMask(int w, int h) : width(w), height(h), labels(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t at(int u, int v) const { return labels[static_cast<std::size_t>(v) * width + u]; }
  std::uint8_t& at(int u, int v) { return labels[static_cast<std::size_t>(v) * width + u]; }
  PartClass part(int u, int v) const { return static_cast<PartClass>(at(u, v)); }
  std::size_t count(PartClass c) const;
  std::size_t foreground_count() const;
  bool operator==(const PartMask&) const = default;
};

struct BoundingBox {
  double u_min = 0, v_min = 0, u_max = 0, v_max = 0;
  bool clamped = false;
  bool operator==(const BoundingBox&) const = default;
};

struct Capsule {
  Vec3 a;
  Vec3 b;
  double radius = 0;
  PartClass part = PartClass::Background;
};

/// (u, v) of a point given in the object frame. Throws BehindCamera when the
/// camera-frame depth is <= 1e-6 mm.
Vec2 project_point(const CameraIntrinsics& cam, const RigidTransform& T_cam_obj, const Vec3& p_obj);

/// Camera-frame point at depth z on the ray through pixel (u, v).
Vec3 back_project(const CameraIntrinsics& cam, const Vec2& uv, double z);

/// Square box of half side alpha * z around the centre, clipped to the image.
/// Throws DepthOutOfRange outside [z_min, z_max].
BoundingBox depth_adaptive_bbox(const Vec2& center, double z, double alpha, const CameraIntrinsics& cam,
                                double z_min = 200.0, double z_max = 300.0);

/// Hinge and jaw capsules in the base frame, ordered jaw1, jaw2, hinge.
std::array<Capsule, 3> part_capsules(const ComponentPoses& poses, const GeometryParams& geo);

/// Smallest ray parameter t >= 0 at which origin + t * dir enters the capsule.
std::optional<double> ray_capsule_entry(const Vec3& origin, const Vec3& dir, const Capsule& capsule);

/// Per pixel, the class of the nearest capsule hit along the pixel-centre ray.
PartMask render_silhouette(const ComponentPoses& poses, const GeometryParams& geo, const CameraIntrinsics& cam,
                           const RigidTransform& T_cam_base);

/// Projected keypoints of one view. A keypoint is visible when it projects
/// inside the image with positive depth and, along its line of sight, the
/// surface of its own part is no more than `occlusion_tol` mm behind the
/// nearest capsule surface.
KeypointSet annotate_keypoints(const ComponentPoses& poses, const GeometryParams& geo, const CameraIntrinsics& cam,
                               const RigidTransform& T_cam_base, const KeypointLayout& layout,
                               double occlusion_tol = 0.05);

struct StereoKeypoints {
  KeypointSet left;
  KeypointSet right;
};

StereoKeypoints keypoint_annotations(const ComponentPoses& poses, const GeometryParams& geo, const StereoRig& rig,
                                     const RigidTransform& T_cam_base, const KeypointLayout& layout,
                                     double occlusion_tol = 0.05);

/// Binary P5 PGM with one byte per pixel holding the class index.
void write_pgm(const PartMask& mask, const std::filesystem::path& path);
PartMask read_pgm(const std::filesystem::path& path);

}  // namespace cmvs
