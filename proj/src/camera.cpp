#include "cmvs/camera.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>

#include "cmvs/error.hpp"

namespace cmvs {

CameraIntrinsics CameraIntrinsics::from_focal_length(double focal_length_mm, double pixel_pitch_mm, int width,
                                                     int height) {
  if (!(focal_length_mm > 0.0) || !(pixel_pitch_mm > 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "focal length and pixel pitch must be positive");
  }
  CameraIntrinsics cam;
  cam.fx = cam.fy = focal_length_mm / pixel_pitch_mm;
  cam.width = width;
  cam.height = height;
  cam.cx = 0.5 * width - 0.5;
  cam.cy = 0.5 * height - 0.5;
  cam.validate();
  return cam;
}

CameraIntrinsics CameraIntrinsics::scaled(int new_width, int new_height) const {
  const double sx = static_cast<double>(new_width) / width;
  const double sy = static_cast<double>(new_height) / height;
  CameraIntrinsics out;
  out.fx = fx * sx;
  out.fy = fy * sy;
  out.cx = sx * (cx + 0.5) - 0.5;
  out.cy = sy * (cy + 0.5) - 0.5;
  out.width = new_width;
  out.height = new_height;
  out.validate();
  return out;
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0 && fy > 0.0)) throw Error(ErrorCode::InvalidConfig, "camera focal lengths must be positive");
  if (width <= 0 || height <= 0) throw Error(ErrorCode::InvalidConfig, "camera resolution must be positive");
  if (!inside(Vec2(cx, cy))) throw Error(ErrorCode::InvalidConfig, "principal point outside the image");
}

bool CameraIntrinsics::inside(const Vec2& uv) const {
  return uv.x() >= -0.5 && uv.x() <= width - 0.5 && uv.y() >= -0.5 && uv.y() <= height - 0.5;
}

StereoRig StereoRig::rectified(const CameraIntrinsics& cam, double baseline_mm) {
  if (!(baseline_mm > 0.0)) throw Error(ErrorCode::InvalidConfig, "stereo baseline must be positive");
  StereoRig rig;
  rig.left = cam;
  rig.right = cam;
  rig.right_from_left = RigidTransform::from_translation(Vec3(-baseline_mm, 0, 0));
  return rig;
}

StereoRig StereoRig::scaled(int new_width, int new_height) const {
  StereoRig rig = *this;
  rig.left = left.scaled(new_width, new_height);
  rig.right = right.scaled(new_width, new_height);
  return rig;
}

void StereoRig::validate() const {
  left.validate();
  right.validate();
  if (!(baseline() > 0.0)) throw Error(ErrorCode::InvalidConfig, "stereo baseline must be positive");
}

KeypointLayout KeypointLayout::standard(const GeometryParams& geo, int per_jaw) {
  KeypointLayout layout;
  const double d = geo.jaw_length;
  for (PartClass jaw : {PartClass::Jaw1, PartClass::Jaw2}) {
    for (int i = 0; i < per_jaw; ++i) {
      const double s = 0.3 * d + 0.7 * d * i / (per_jaw - 1);  // distance from the pivot
      layout.entries.push_back({jaw, Vec3(s - d, 0, 0)});
    }
  }
  for (double station : {0.25, 0.5, 0.75}) {
    for (double lateral : {-0.5, 0.0, 0.5}) {
      layout.entries.push_back({PartClass::Hinge, Vec3(-station * geo.hinge_length, lateral * geo.hinge_radius, 0)});
    }
  }
  return layout;
}

std::size_t PartMask::count(PartClass c) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), static_cast<std::uint8_t>(c)));
}

std::size_t PartMask::foreground_count() const { return labels.size() - count(PartClass::Background); }

Vec2 project_point(const CameraIntrinsics& cam, const RigidTransform& T_cam_obj, const Vec3& p_obj) {
  const Vec3 p = T_cam_obj.apply(p_obj);
  if (!(p.z() > 1e-6)) throw Error(ErrorCode::BehindCamera, "point depth " + std::to_string(p.z()) + " mm");
  return {cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy};
}

Vec3 back_project(const CameraIntrinsics& cam, const Vec2& uv, double z) {
  return {z * (uv.x() - cam.cx) / cam.fx, z * (uv.y() - cam.cy) / cam.fy, z};
}

BoundingBox depth_adaptive_bbox(const Vec2& center, double z, double alpha, const CameraIntrinsics& cam, double z_min,
                                double z_max) {
  if (!(z >= z_min && z <= z_max)) {
    throw Error(ErrorCode::DepthOutOfRange, "depth " + std::to_string(z) + " mm outside [" + std::to_string(z_min) +
                                                ", " + std::to_string(z_max) + "]");
  }
  const double m = alpha * z;
  BoundingBox box{center.x() - m, center.y() - m, center.x() + m, center.y() + m, false};
  const double lo_u = -0.5, lo_v = -0.5, hi_u = cam.width - 0.5, hi_v = cam.height - 0.5;
  if (box.u_min < lo_u || box.v_min < lo_v || box.u_max > hi_u || box.v_max > hi_v) {
    box.clamped = true;
    box.u_min = std::clamp(box.u_min, lo_u, hi_u);
    box.u_max = std::clamp(box.u_max, lo_u, hi_u);
    box.v_min = std::clamp(box.v_min, lo_v, hi_v);
    box.v_max = std::clamp(box.v_max, lo_v, hi_v);
  }
  return box;
}

std::array<Capsule, 3> part_capsules(const ComponentPoses& poses, const GeometryParams& geo) {
  const Vec3 jaw_base(-geo.jaw_length, 0, 0);
  return {Capsule{poses.jaw1.apply(jaw_base), poses.jaw1.translation, geo.jaw_radius, PartClass::Jaw1},
          Capsule{poses.jaw2.apply(jaw_base), poses.jaw2.translation, geo.jaw_radius, PartClass::Jaw2},
          Capsule{poses.hinge.apply(Vec3(-geo.hinge_length, 0, 0)), poses.hinge.translation, geo.hinge_radius,
                  PartClass::Hinge}};
}

namespace {

// Front intersection of a unit-direction ray with a sphere, t >= 0.
double sphere_entry(const Vec3& o, const Vec3& d, const Vec3& c, double r) {
  const Vec3 oc = o - c;
  const double b = d.dot(oc);
  const double h = b * b - (oc.squaredNorm() - r * r);
  if (h < 0.0) return std::numeric_limits<double>::infinity();
  const double t = -b - std::sqrt(h);
  return t >= 0.0 ? t : std::numeric_limits<double>::infinity();
}

}  // namespace

std::optional<double> ray_capsule_entry(const Vec3& origin, const Vec3& dir, const Capsule& capsule) {
  const double scale = dir.norm();
  const Vec3 d = dir / scale;
  const double inf = std::numeric_limits<double>::infinity();
  double best = std::min(sphere_entry(origin, d, capsule.a, capsule.radius),
                         sphere_entry(origin, d, capsule.b, capsule.radius));

  const Vec3 ba = capsule.b - capsule.a;
  const Vec3 oa = origin - capsule.a;
  const double baba = ba.dot(ba);
  const double bard = ba.dot(d);
  const double baoa = ba.dot(oa);
  const double qa = baba - bard * bard;
  if (qa > 1e-12 * baba) {
    const double qb = baba * d.dot(oa) - baoa * bard;
    const double qc = baba * oa.dot(oa) - baoa * baoa - capsule.radius * capsule.radius * baba;
    const double h = qb * qb - qa * qc;
    if (h >= 0.0) {
      const double t = (-qb - std::sqrt(h)) / qa;
      const double y = baoa + t * bard;
      if (t >= 0.0 && y >= 0.0 && y <= baba) best = std::min(best, t);
    }
  }
  if (best == inf) return std::nullopt;
  return best / scale;
}

PartMask render_silhouette(const ComponentPoses& poses, const GeometryParams& geo, const CameraIntrinsics& cam,
                           const RigidTransform& T_cam_base) {
  auto capsules = part_capsules(poses, geo);
  for (auto& c : capsules) {
    c.a = T_cam_base.apply(c.a);
    c.b = T_cam_base.apply(c.b);
  }
  PartMask mask(cam.width, cam.height);
  const Vec3 origin = Vec3::Zero();
  for (int v = 0; v < cam.height; ++v) {
    for (int u = 0; u < cam.width; ++u) {
      const Vec3 dir((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
      double nearest = std::numeric_limits<double>::infinity();
      for (const auto& c : capsules) {
        const auto t = ray_capsule_entry(origin, dir, c);
        if (t && *t < nearest) {
          nearest = *t;
          mask.at(u, v) = static_cast<std::uint8_t>(c.part);
        }
      }
    }
  }
  return mask;
}

KeypointSet annotate_keypoints(const ComponentPoses& poses, const GeometryParams& geo, const CameraIntrinsics& cam,
                               const RigidTransform& T_cam_base, const KeypointLayout& layout, double occlusion_tol) {
  auto capsules = part_capsules(poses, geo);
  for (auto& c : capsules) {
    c.a = T_cam_base.apply(c.a);
    c.b = T_cam_base.apply(c.b);
  }
  auto frame_of = [&](PartClass part) -> const RigidTransform& {
    switch (part) {
      case PartClass::Jaw1: return poses.jaw1;
      case PartClass::Jaw2: return poses.jaw2;
      default: return poses.hinge;
    }
  };

  KeypointSet out;
  out.reserve(layout.size());
  for (const auto& entry : layout.entries) {
    const Vec3 p = T_cam_base.apply(frame_of(entry.part).apply(entry.local));
    Keypoint kp;
    if (!(p.z() > 1e-6)) {
      out.push_back(kp);
      continue;
    }
    kp.x = cam.fx * p.x() / p.z() + cam.cx;
    kp.y = cam.fy * p.y() / p.z() + cam.cy;
    if (cam.inside(Vec2(kp.x, kp.y))) {
      // Ray parameter t = 1 at the keypoint itself; distances are t * |p|.
      double own = std::numeric_limits<double>::infinity();
      double nearest = std::numeric_limits<double>::infinity();
      for (const auto& c : capsules) {
        const auto t = ray_capsule_entry(Vec3::Zero(), p, c);
        if (!t) continue;
        nearest = std::min(nearest, *t);
        if (c.part == entry.part) own = *t;
      }
      const double len = p.norm();
      if (own <= 1.0 + 1e-12 && (own - nearest) * len <= occlusion_tol) kp.rho = 1;
    }
    out.push_back(kp);
  }
  return out;
}

StereoKeypoints keypoint_annotations(const ComponentPoses& poses, const GeometryParams& geo, const StereoRig& rig,
                                     const RigidTransform& T_cam_base, const KeypointLayout& layout,
                                     double occlusion_tol) {
  return {annotate_keypoints(poses, geo, rig.left, T_cam_base, layout, occlusion_tol),
          annotate_keypoints(poses, geo, rig.right, rig.right_from_left * T_cam_base, layout, occlusion_tol)};
}

void write_pgm(const PartMask& mask, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  out << "P5\n" << mask.width << ' ' << mask.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(mask.labels.data()), static_cast<std::streamsize>(mask.labels.size()));
  if (!out) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

namespace {

int read_pgm_int(std::istream& in) {
  int c = in.peek();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else {
      in.get();
    }
    c = in.peek();
  }
  int value = -1;
  in >> value;
  return value;
}

}  // namespace

PartMask read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5") throw Error(ErrorCode::IoError, path.string() + " is not a binary PGM");
  const int w = read_pgm_int(in);
  const int h = read_pgm_int(in);
  const int maxval = read_pgm_int(in);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw Error(ErrorCode::IoError, "bad PGM header in " + path.string());
  in.get();  // single whitespace before the raster
  PartMask mask(w, h);
  in.read(reinterpret_cast<char*>(mask.labels.data()), static_cast<std::streamsize>(mask.labels.size()));
  if (in.gcount() != static_cast<std::streamsize>(mask.labels.size())) {
    throw Error(ErrorCode::IoError, "truncated PGM raster in " + path.string());
  }
  return mask;
}

}  // namespace cmvs
