#include "cmvs/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <thread>

#include <json.hpp>

#include "cmvs/error.hpp"
#include "cmvs/parallel.hpp"

namespace cmvs {

using nlohmann::json;

namespace {

const char* const kJointNames[7] = {"q1", "q2", "q3", "q4", "q5", "q6", "q7"};

}  // namespace

SamplerConfig SamplerConfig::defaults() {
  SamplerConfig cfg;
  cfg.ranges = JointLimits::mechanism().joints;
  cfg.ranges[0] = {0.0, 10.0};
  return cfg;
}

void SamplerConfig::validate(const JointLimits& limits) const {
  for (int i = 0; i < 7; ++i) {
    const Range& r = ranges[i];
    const std::string field = std::string("sampler.") + kJointNames[i];
    if (!(r.min <= r.max)) throw Error(ErrorCode::InvalidConfig, field + ": min exceeds max");
    if (!limits.joints[i].contains(r.min) || !limits.joints[i].contains(r.max)) {
      throw Error(ErrorCode::InvalidConfig, field + ": range outside the mechanism limits [" +
                                                std::to_string(limits.joints[i].min) + ", " +
                                                std::to_string(limits.joints[i].max) + "]");
    }
  }
  if (max_rejections < 1) throw Error(ErrorCode::InvalidConfig, "sampler.max_rejections must be positive");
}

JointConfig sample_joint_config(const SamplerConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](int i) {
    const Range& r = cfg.ranges[i];
    return r.min + (r.max - r.min) * unit(rng);
  };
  JointConfig q;
  q.q1 = draw(0);
  q.q2 = draw(1);
  q.q3 = draw(2);
  q.q4 = draw(3);
  q.q5 = draw(4);
  for (int attempt = 0; attempt <= cfg.max_rejections; ++attempt) {
    q.q6 = draw(5);
    q.q7 = draw(6);
    if (q.q6 - q.q7 >= cfg.min_opening) return q;
  }
  throw Error(ErrorCode::SamplingExhausted,
              "no jaw pair with opening >= " + std::to_string(cfg.min_opening) + " rad after " +
                  std::to_string(cfg.max_rejections) + " redraws");
}

SceneConfig SceneConfig::defaults() {
  SceneConfig scene;
  const CameraIntrinsics full = CameraIntrinsics::from_focal_length(12.465, 12.465 / 2100.0, 2048, 1536);
  scene.rig = StereoRig::rectified(full, 63.3).scaled(256, 192);
  scene.layout = KeypointLayout::standard(scene.geometry);
  return scene;
}

void SceneConfig::validate() const {
  geometry.validate();
  rig.validate();
  if (!(depth_min > 0.0 && depth_min <= depth_max)) throw Error(ErrorCode::InvalidConfig, "scene depth range invalid");
  if (!(lateral_jitter >= 0.0)) throw Error(ErrorCode::InvalidConfig, "scene.lateral_jitter must be >= 0");
  if (!(bbox_alpha > 0.0)) throw Error(ErrorCode::InvalidConfig, "scene.bbox_alpha must be positive");
  if (!(occlusion_tol >= 0.0)) throw Error(ErrorCode::InvalidConfig, "scene.occlusion_tol must be >= 0");
  if (layout.size() == 0) throw Error(ErrorCode::InvalidConfig, "scene keypoint layout is empty");
}

UnitQuaternion nominal_camera_rotation() {
  Mat3 r;
  r << 1, 0, 0, 0, 0, 1, 0, -1, 0;
  return UnitQuaternion::from_matrix(r);
}

RigidTransform place_camera(const SceneConfig& scene, const Vec3& hinge_in_base, double depth, const Vec2& offset) {
  const UnitQuaternion rot = nominal_camera_rotation();
  const Vec3 h = rot.rotate(hinge_in_base);
  const Vec3 want(0.5 * scene.rig.baseline() + offset.x(), offset.y(), depth);
  return {rot, want - h};
}

RigidTransform sample_camera_placement(const SceneConfig& scene, const Vec3& hinge_in_base, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double depth = scene.depth_min + (scene.depth_max - scene.depth_min) * unit(rng);
  const double ox = scene.lateral_jitter * (2.0 * unit(rng) - 1.0);
  const double oy = scene.lateral_jitter * (2.0 * unit(rng) - 1.0);
  return place_camera(scene, hinge_in_base, depth, Vec2(ox, oy));
}

AnnotationRecord generate_record(std::uint64_t id, const JointConfig& q, const SceneConfig& scene,
                                 const RigidTransform& cam_from_base) {
  const ComponentPoses poses = forward_kinematics(q, scene.geometry);
  AnnotationRecord rec;
  rec.id = id;
  rec.q = q;
  rec.cam_from_base = cam_from_base;

  const RigidTransform right_from_base = scene.rig.right_from_left * cam_from_base;
  const StereoKeypoints kps =
      keypoint_annotations(poses, scene.geometry, scene.rig, cam_from_base, scene.layout, scene.occlusion_tol);
  rec.keypoints_left = kps.left;
  rec.keypoints_right = kps.right;
  rec.mask_left = render_silhouette(poses, scene.geometry, scene.rig.left, cam_from_base);
  rec.mask_right = render_silhouette(poses, scene.geometry, scene.rig.right, right_from_base);

  auto box = [&](const CameraIntrinsics& cam, const RigidTransform& view) {
    const Vec3 h = view.apply(poses.hinge.translation);
    return depth_adaptive_bbox(project_point(cam, view, poses.hinge.translation), h.z(), scene.bbox_alpha, cam,
                               scene.depth_min, scene.depth_max);
  };
  rec.bbox_left = box(scene.rig.left, cam_from_base);
  rec.bbox_right = box(scene.rig.right, right_from_base);

  rec.jaw1 = cam_from_base * poses.jaw1;
  rec.jaw2 = cam_from_base * poses.jaw2;
  rec.hinge = cam_from_base * poses.hinge;
  rec.tcp = cam_from_base * poses.tcp;
  return rec;
}

AnnotationRecord generate_record(std::uint64_t id, const JointConfig& q, const SceneConfig& scene) {
  const ComponentPoses poses = forward_kinematics(q, scene.geometry);
  return generate_record(id, q, scene,
                         place_camera(scene, poses.hinge.translation, 0.5 * (scene.depth_min + scene.depth_max)));
}

std::mt19937_64 record_rng(std::uint64_t seed, std::uint64_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(id >> 32), 0x636d7673u};
  return std::mt19937_64(seq);
}

std::mt19937_64 named_rng(std::uint64_t seed, std::string_view stream, std::uint64_t index) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h),    static_cast<std::uint32_t>(h >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

std::vector<AnnotationRecord> generate_dataset(const SamplerConfig& sampler, const SceneConfig& scene, std::size_t count,
                                               std::uint64_t seed, int workers) {
  sampler.validate();
  scene.validate();
  std::vector<AnnotationRecord> records(count);
  auto make = [&](std::size_t i) {
    std::mt19937_64 rng = record_rng(seed, i);
    const JointConfig q = sample_joint_config(sampler, rng);
    const Vec3 hinge = forward_kinematics(q, scene.geometry).hinge.translation;
    records[i] = generate_record(i, q, scene, sample_camera_placement(scene, hinge, rng));
  };

  parallel_for(count, workers, make);
  return records;
}

namespace {

json pose_json(const RigidTransform& t) {
  const auto& r = t.rotation;
  return {{"q", {r.w(), r.x(), r.y(), r.z()}}, {"t", {t.translation.x(), t.translation.y(), t.translation.z()}}};
}

RigidTransform pose_from_json(const json& j) {
  const auto& q = j.at("q");
  const auto& t = j.at("t");
  return {UnitQuaternion::from_stored(q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(),
                                      q.at(3).get<double>()),
          Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>())};
}

json keypoints_json(const KeypointSet& kps) {
  json arr = json::array();
  for (const auto& k : kps) arr.push_back({k.x, k.y, k.rho});
  return arr;
}

KeypointSet keypoints_from_json(const json& j) {
  KeypointSet out;
  for (const auto& e : j) out.push_back({e.at(0).get<double>(), e.at(1).get<double>(), e.at(2).get<int>()});
  return out;
}

json bbox_json(const BoundingBox& b) { return {{"box", {b.u_min, b.v_min, b.u_max, b.v_max}}, {"clamped", b.clamped}}; }

BoundingBox bbox_from_json(const json& j) {
  const auto& b = j.at("box");
  return {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>(),
          j.at("clamped").get<bool>()};
}

std::string mask_name(std::uint64_t id, char view) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "masks/%06llu_%c.pgm", static_cast<unsigned long long>(id), view);
  return buf;
}

}  // namespace

void write_dataset(const std::vector<AnnotationRecord>& records, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "masks", ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + (dir / "masks").string() + ": " + ec.message());
  std::ofstream index(dir / "index.jsonl", std::ios::binary);
  if (!index) throw Error(ErrorCode::IoError, "cannot open " + (dir / "index.jsonl").string());

  index << json{{"format", "cmvs-dataset"}, {"schema_version", kDatasetSchemaVersion}, {"count", records.size()}}.dump()
        << '\n';
  for (const auto& r : records) {
    const std::string left = mask_name(r.id, 'L');
    const std::string right = mask_name(r.id, 'R');
    write_pgm(r.mask_left, dir / left);
    write_pgm(r.mask_right, dir / right);
    json j;
    j["id"] = r.id;
    j["q"] = r.q.as_array();
    j["cam_from_base"] = pose_json(r.cam_from_base);
    j["keypoints_left"] = keypoints_json(r.keypoints_left);
    j["keypoints_right"] = keypoints_json(r.keypoints_right);
    j["mask_left"] = left;
    j["mask_right"] = right;
    j["bbox_left"] = bbox_json(r.bbox_left);
    j["bbox_right"] = bbox_json(r.bbox_right);
    j["poses"] = {{"jaw1", pose_json(r.jaw1)},
                  {"jaw2", pose_json(r.jaw2)},
                  {"hinge", pose_json(r.hinge)},
                  {"tcp", pose_json(r.tcp)}};
    index << j.dump() << '\n';
  }
  if (!index) throw Error(ErrorCode::IoError, "failed writing " + (dir / "index.jsonl").string());
}

std::vector<AnnotationRecord> read_dataset(const std::filesystem::path& dir) {
  std::ifstream index(dir / "index.jsonl", std::ios::binary);
  if (!index) throw Error(ErrorCode::IoError, "cannot open " + (dir / "index.jsonl").string());
  std::string line;
  if (!std::getline(index, line)) throw Error(ErrorCode::IoError, "empty dataset index");

  std::vector<AnnotationRecord> records;
  try {
    const json header = json::parse(line);
    const int version = header.at("schema_version").get<int>();
    if (version != kDatasetSchemaVersion) {
      throw Error(ErrorCode::SchemaVersionMismatch, "dataset schema version " + std::to_string(version) +
                                                        ", expected " + std::to_string(kDatasetSchemaVersion));
    }
    while (std::getline(index, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      AnnotationRecord r;
      r.id = j.at("id").get<std::uint64_t>();
      r.q = JointConfig::from_array(j.at("q").get<std::array<double, 7>>());
      r.cam_from_base = pose_from_json(j.at("cam_from_base"));
      r.keypoints_left = keypoints_from_json(j.at("keypoints_left"));
      r.keypoints_right = keypoints_from_json(j.at("keypoints_right"));
      r.mask_left = read_pgm(dir / j.at("mask_left").get<std::string>());
      r.mask_right = read_pgm(dir / j.at("mask_right").get<std::string>());
      r.bbox_left = bbox_from_json(j.at("bbox_left"));
      r.bbox_right = bbox_from_json(j.at("bbox_right"));
      const json& p = j.at("poses");
      r.jaw1 = pose_from_json(p.at("jaw1"));
      r.jaw2 = pose_from_json(p.at("jaw2"));
      r.hinge = pose_from_json(p.at("hinge"));
      r.tcp = pose_from_json(p.at("tcp"));
      records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, std::string("malformed dataset index: ") + e.what());
  }
  return records;
}

DatasetStats dataset_stats(const std::vector<AnnotationRecord>& records, const SamplerConfig& sampler) {
  DatasetStats s;
  s.count = records.size();
  std::size_t vis_l = 0, vis_r = 0, total_l = 0, total_r = 0, clamped = 0;
  for (const auto& r : records) {
    const auto a = r.q.as_array();
    for (int i = 0; i < 7; ++i) {
      const Range& range = sampler.ranges[i];
      const double width = range.max - range.min;
      int bin = width > 0.0 ? static_cast<int>((a[i] - range.min) / width * 10.0) : 0;
      bin = std::clamp(bin, 0, 9);
      ++s.joint_histograms[i][bin];
    }
    for (const auto& k : r.keypoints_left) vis_l += k.rho;
    for (const auto& k : r.keypoints_right) vis_r += k.rho;
    total_l += r.keypoints_left.size();
    total_r += r.keypoints_right.size();
    clamped += r.bbox_left.clamped + r.bbox_right.clamped;
  }
  if (total_l) s.visibility_left = static_cast<double>(vis_l) / total_l;
  if (total_r) s.visibility_right = static_cast<double>(vis_r) / total_r;
  if (!records.empty()) s.bbox_clamped = static_cast<double>(clamped) / (2.0 * records.size());
  return s;
}

}  // namespace cmvs
