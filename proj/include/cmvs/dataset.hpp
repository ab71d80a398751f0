#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string_view>
#include <vector>

#include "cmvs/camera.hpp"
#include "cmvs/kinematics.hpp"

namespace cmvs {

inline constexpr int kDatasetSchemaVersion = 1;

struct SamplerConfig {
  /// Per-joint sampling intervals, q1..q7.
  std::array<Range, 7> ranges;
  double min_opening = deg2rad(5.0);  // q6 - q7 lower bound, rad
  int max_rejections = 1000;

  /// q1 in [0, 10] mm, the remaining joints over their mechanism limits.
  static SamplerConfig defaults();
  /// Throws InvalidConfig naming the offending range.
  void validate(const JointLimits& limits = JointLimits::mechanism()) const;
};

/// Uniform per-joint sample, redrawing the jaw pair until q6 - q7 >= min_opening.
/// Throws SamplingExhausted after max_rejections redraws.
JointConfig sample_joint_config(const SamplerConfig& cfg, std::mt19937_64& rng);

struct SceneConfig {
  GeometryParams geometry;
  /// Rig at the annotation resolution.
  StereoRig rig;
  double depth_min = 200.0;  // hinge depth range, mm
  double depth_max = 300.0;
  /// Half-width of the uniform in-plane offset of the hinge, mm.
  double lateral_jitter = 5.0;
  /// Box half side per mm of depth at the annotation resolution.
  double bbox_alpha = 0.125;
  double occlusion_tol = 0.05;
  KeypointLayout layout;

  /// 12.465 mm lens, fx = 2100 px at 2048 x 1536, annotations at 256 x 192,
  /// 63.3 mm baseline.
  static SceneConfig defaults();
  void validate() const;
};

/// Fixed viewing direction: camera optical axis along base -y, image x along base x.
UnitQuaternion nominal_camera_rotation();

/// Camera-from-base transform putting the hinge pivot at `depth` in front of
/// the left camera, centred between the two cameras plus an in-plane offset.
RigidTransform place_camera(const SceneConfig& scene, const Vec3& hinge_in_base, double depth,
                            const Vec2& offset = Vec2::Zero());

/// Depth uniform in [depth_min, depth_max], offset uniform in +-lateral_jitter.
RigidTransform sample_camera_placement(const SceneConfig& scene, const Vec3& hinge_in_base, std::mt19937_64& rng);

struct AnnotationRecord {
  std::uint64_t id = 0;
  JointConfig q;
  RigidTransform cam_from_base;
  KeypointSet keypoints_left;
  KeypointSet keypoints_right;
  PartMask mask_left;
  PartMask mask_right;
  BoundingBox bbox_left;
  BoundingBox bbox_right;
  /// Component poses in the left camera frame.
  RigidTransform jaw1;
  RigidTransform jaw2;
  RigidTransform hinge;
  RigidTransform tcp;

  bool operator==(const AnnotationRecord&) const = default;
};

AnnotationRecord generate_record(std::uint64_t id, const JointConfig& q, const SceneConfig& scene,
                                 const RigidTransform& cam_from_base);

/// Nominal placement: mid-range depth, no offset.
AnnotationRecord generate_record(std::uint64_t id, const JointConfig& q, const SceneConfig& scene);

/// Generator for record `id`, independent of how records are split over workers.
std::mt19937_64 record_rng(std::uint64_t seed, std::uint64_t id);

/// Generator for one named sub-stream ("observer", "plant", ...) of item
/// `index` under a master seed.
std::mt19937_64 named_rng(std::uint64_t seed, std::string_view stream, std::uint64_t index);

/// Records 0..count-1. Output is identical for any worker count.
std::vector<AnnotationRecord> generate_dataset(const SamplerConfig& sampler, const SceneConfig& scene, std::size_t count,
                                               std::uint64_t seed, int workers = 1);

/// Writes dir/index.jsonl (header line + one line per record) and
/// dir/masks/{id}_{L|R}.pgm. Throws IoError.
void write_dataset(const std::vector<AnnotationRecord>& records, const std::filesystem::path& dir);

/// Throws IoError or SchemaVersionMismatch.
std::vector<AnnotationRecord> read_dataset(const std::filesystem::path& dir);

struct DatasetStats {
  std::size_t count = 0;
  /// Ten equal-width bins over each joint's sampling range.
  std::array<std::array<std::size_t, 10>, 7> joint_histograms{};
  double visibility_left = 0;  // fraction of visible keypoints
  double visibility_right = 0;
  double bbox_clamped = 0;  // fraction of clipped boxes over both views
};

DatasetStats dataset_stats(const std::vector<AnnotationRecord>& records, const SamplerConfig& sampler);

}  // namespace cmvs
