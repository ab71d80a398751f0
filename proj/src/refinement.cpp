#include "cmvs/refinement.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include <Eigen/Cholesky>

#include "cmvs/error.hpp"
#include "cmvs/parallel.hpp"

namespace cmvs {

FeatureObservation observation_from_record(const AnnotationRecord& rec) {
  return {rec.mask_left, rec.mask_right, rec.keypoints_left, rec.keypoints_right};
}

namespace {

// Lower envelope of parabolas (q - v)^2 + f(v), in place over a strided line.
void edt_1d(const double* f, double* d, int n, std::vector<int>& v, std::vector<double>& z) {
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * q - 2.0 * p);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (s <= z[k]) {
      // k == 0 and the new parabola dominates everywhere
      v[0] = q;
      z[1] = std::numeric_limits<double>::infinity();
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace

DistanceField distance_field(const PartMask& mask, double gamma) {
  if (!(gamma > 0.0)) throw Error(ErrorCode::InvalidConfig, "distance field gamma must be positive");
  const int w = mask.width, h = mask.height;
  DistanceField field;
  field.width = w;
  field.height = h;
  field.gamma = gamma;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (mask.foreground_count() == 0) {
    field.empty_mask = true;
    field.values.assign(n, std::hypot(double(w), double(h)) / gamma);
    return field;
  }

  // Large but finite so the envelope arithmetic stays ordered.
  const double far = 1e20;
  std::vector<double> grid(n);
  for (std::size_t i = 0; i < n; ++i) grid[i] = mask.labels[i] ? 0.0 : far;

  const int longest = std::max(w, h);
  std::vector<double> f(longest), d(longest), z(longest + 1);
  std::vector<int> v(longest);
  for (int u = 0; u < w; ++u) {
    for (int y = 0; y < h; ++y) f[y] = grid[static_cast<std::size_t>(y) * w + u];
    edt_1d(f.data(), d.data(), h, v, z);
    for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + u] = d[y];
  }
  for (int y = 0; y < h; ++y) {
    double* row = grid.data() + static_cast<std::size_t>(y) * w;
    std::copy(row, row + w, f.begin());
    edt_1d(f.data(), d.data(), w, v, z);
    std::copy(d.begin(), d.begin() + w, row);
  }
  field.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) field.values[i] = std::sqrt(grid[i]) / gamma;
  return field;
}

void LossWeights::validate() const {
  if (!(mse >= 0 && dist >= 0 && scale >= 0 && kpt >= 0)) {
    throw Error(ErrorCode::InvalidConfig, "loss weights must be non-negative");
  }
  if (!(beta >= 0)) throw Error(ErrorCode::InvalidConfig, "smooth-l1 beta must be non-negative");
  if (!(gamma > 0)) throw Error(ErrorCode::InvalidConfig, "distance field gamma must be positive");
}

LossTerms& LossTerms::operator+=(const LossTerms& o) {
  mse += o.mse;
  dist += o.dist;
  scale += o.scale;
  kpt += o.kpt;
  total += o.total;
  return *this;
}

double smooth_l1(double x, double beta) {
  const double a = std::abs(x);
  return a < beta ? 0.5 * x * x / beta : a - 0.5 * beta;
}

namespace {

double smooth_l1_derivative(double x, double beta) {
  if (std::abs(x) < beta) return x / beta;
  return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0);
}

void check_view(const PartMask& ref, std::size_t pixels, const DistanceField& field) {
  if (pixels != ref.labels.size() || field.width != ref.width || field.height != ref.height) {
    throw Error(ErrorCode::ResolutionMismatch, "rendered view, reference mask and distance field differ in size");
  }
}

// Silhouette part of one view plus dL/dS per pixel.
LossTerms silhouette_terms(std::span<const double> s, const PartMask& ref, const DistanceField& field,
                           const LossWeights& w, std::vector<double>* dl_ds) {
  LossTerms t;
  double area_rend = 0, area_ref = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double r = ref.labels[i] ? 1.0 : 0.0;
    t.mse += (s[i] - r) * (s[i] - r);
    t.dist += s[i] * field.values[i];
    area_rend += s[i];
    area_ref += r;
  }
  const double npix = static_cast<double>(s.size());
  t.scale = std::abs(area_rend - area_ref) / npix;
  if (dl_ds) {
    const double diff = area_rend - area_ref;
    const double ds = w.scale * (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) / npix;
    dl_ds->resize(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double r = ref.labels[i] ? 1.0 : 0.0;
      (*dl_ds)[i] = w.mse * 2.0 * (s[i] - r) + w.dist * field.values[i] + ds;
    }
  }
  return t;
}

}  // namespace

LossTerms view_loss(std::span<const double> silhouette, std::span<const Vec2> keypoints, const PartMask& ref_mask,
                    const KeypointSet& ref_keypoints, const DistanceField& field, const LossWeights& w) {
  check_view(ref_mask, silhouette.size(), field);
  if (keypoints.size() != ref_keypoints.size()) {
    throw Error(ErrorCode::ResolutionMismatch, "rendered and reference keypoint counts differ");
  }
  LossTerms t = silhouette_terms(silhouette, ref_mask, field, w, nullptr);
  const double k = static_cast<double>(ref_keypoints.size());
  for (std::size_t j = 0; j < ref_keypoints.size(); ++j) {
    if (!ref_keypoints[j].rho) continue;
    t.kpt += ref_keypoints[j].rho *
             (smooth_l1(keypoints[j].x() - ref_keypoints[j].x, w.beta) +
              smooth_l1(keypoints[j].y() - ref_keypoints[j].y, w.beta)) /
             k;
  }
  t.total = w.mse * t.mse + w.dist * t.dist + w.scale * t.scale + w.kpt * t.kpt;
  return t;
}

LossTerms alignment_loss(const FeatureObservation& rendered, const FeatureObservation& reference,
                         const LossWeights& weights, const std::array<DistanceField, 2>& fields) {
  weights.validate();
  auto one = [&](const PartMask& mask, const KeypointSet& kps, const PartMask& ref_mask, const KeypointSet& ref_kps,
                 const DistanceField& field) {
    if (mask.width != ref_mask.width || mask.height != ref_mask.height) {
      throw Error(ErrorCode::ResolutionMismatch, "rendered and reference masks differ in size");
    }
    std::vector<double> s(mask.labels.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = mask.labels[i] ? 1.0 : 0.0;
    std::vector<Vec2> k;
    k.reserve(kps.size());
    for (const auto& kp : kps) k.emplace_back(kp.x, kp.y);
    return view_loss(s, k, ref_mask, ref_kps, field, weights);
  };
  LossTerms t = one(rendered.mask_left, rendered.keypoints_left, reference.mask_left, reference.keypoints_left, fields[0]);
  t += one(rendered.mask_right, rendered.keypoints_right, reference.mask_right, reference.keypoints_right, fields[1]);
  return t;
}

RefineScene RefineScene::from(const SceneConfig& scene) { return {scene.geometry, scene.rig, scene.layout}; }

void RefineOptions::validate() const {
  weights.validate();
  if (n_opt < 0) throw Error(ErrorCode::InvalidConfig, "refinement n_opt must be non-negative");
  if (!(step > 0)) throw Error(ErrorCode::InvalidConfig, "refinement step must be positive");
  if (!(armijo > 0 && armijo < 1)) throw Error(ErrorCode::InvalidConfig, "armijo constant must be in (0, 1)");
  if (!(edge_width > 0)) throw Error(ErrorCode::InvalidConfig, "edge width must be positive");
  if (max_backtracks < 1) throw Error(ErrorCode::InvalidConfig, "max_backtracks must be at least 1");
  if (!(max_step_px > 0)) throw Error(ErrorCode::InvalidConfig, "max_step_px must be positive");
}

std::size_t pose_parameter_count(PoseMode mode) { return mode == PoseMode::Rigid ? 6 : 18; }

namespace {

// Part order used throughout: jaw1, jaw2, hinge.
const RigidTransform& part_pose(const ComponentPoses& p, int k) {
  return k == 0 ? p.jaw1 : (k == 1 ? p.jaw2 : p.hinge);
}

int part_index(PartClass c) { return c == PartClass::Jaw1 ? 0 : (c == PartClass::Jaw2 ? 1 : 2); }

int group_of(int part, PoseMode mode) { return mode == PoseMode::Rigid ? 0 : part; }

Vec3 pivot_of(const ComponentPoses& p, int part, PoseMode mode) {
  return mode == PoseMode::Rigid ? p.hinge.translation : part_pose(p, part).translation;
}

// d p / d xi for a point p moved by exp(xi) about `pivot`.
Eigen::Matrix<double, 3, 6> point_jacobian(const Vec3& p, const Vec3& pivot) {
  Eigen::Matrix<double, 3, 6> j;
  j.leftCols<3>().setIdentity();
  j.rightCols<3>() = -skew(p - pivot);
  return j;
}

Eigen::Matrix<double, 2, 3> projection_jacobian(const CameraIntrinsics& cam, const Vec3& p) {
  const double iz = 1.0 / p.z();
  Eigen::Matrix<double, 2, 3> j;
  j << cam.fx * iz, 0, -cam.fx * p.x() * iz * iz, 0, cam.fy * iz, -cam.fy * p.y() * iz * iz;
  return j;
}

Vec3 to_view(const RigidTransform& T_view, const Vec3& p) {
  const Vec3 q = T_view.apply(p);
  if (!(q.z() > 1e-6)) throw Error(ErrorCode::BehindCamera, "refined geometry crosses the camera plane");
  return q;
}

struct ProjectedCapsule {
  // Axis end points in the view frame and their derivatives w.r.t. the 6
  // parameters of the capsule's group.
  Vec3 a, b;
  Eigen::Matrix<double, 3, 6> ja, jb;
  double radius = 0;
  // mm -> px conversion at the mean depth of the axis.
  double px_per_mm = 0;
  Eigen::Matrix<double, 1, 6> jscale;
  int group = 0;
  int u0 = 0, u1 = -1, v0 = 0, v1 = -1;  // pixel box, inclusive
};

ProjectedCapsule project_capsule(const Capsule& c, int part, const ComponentPoses& poses, const CameraIntrinsics& cam,
                                 const RigidTransform& T_view, double margin_px, PoseMode mode) {
  ProjectedCapsule pc;
  pc.group = group_of(part, mode);
  pc.radius = c.radius;
  const Vec3 pivot = pivot_of(poses, part, mode);
  const Mat3 rv = T_view.rotation_matrix();
  pc.a = to_view(T_view, c.a);
  pc.b = to_view(T_view, c.b);
  pc.ja = rv * point_jacobian(c.a, pivot);
  pc.jb = rv * point_jacobian(c.b, pivot);
  const double zm = 0.5 * (pc.a.z() + pc.b.z());
  pc.px_per_mm = cam.fx / zm;
  pc.jscale = (-cam.fx / (zm * zm) * 0.5) * (pc.ja.row(2) + pc.jb.row(2));

  const Vec2 ua(cam.fx * pc.a.x() / pc.a.z() + cam.cx, cam.fy * pc.a.y() / pc.a.z() + cam.cy);
  const Vec2 ub(cam.fx * pc.b.x() / pc.b.z() + cam.cx, cam.fy * pc.b.y() / pc.b.z() + cam.cy);
  // sd is scaled at the mean depth; the nearer end can look larger by z_mean / z_min.
  const double zmin = std::min(pc.a.z(), pc.b.z());
  const double reach = (cam.fx * c.radius / zmin + margin_px) * zm / zmin + 1.0;
  pc.u0 = std::max(0, static_cast<int>(std::floor(std::min(ua.x(), ub.x()) - reach)));
  pc.u1 = std::min(cam.width - 1, static_cast<int>(std::ceil(std::max(ua.x(), ub.x()) + reach)));
  pc.v0 = std::max(0, static_cast<int>(std::floor(std::min(ua.y(), ub.y()) - reach)));
  pc.v1 = std::min(cam.height - 1, static_cast<int>(std::ceil(std::max(ua.y(), ub.y()) + reach)));
  return pc;
}

// Signed distance in px between the pixel ray (unit direction `d` through the
// camera centre) and the capsule surface: (distance from the ray to the axis
// segment - radius) scaled to pixels. Its zero level is exactly the
// ray-traced silhouette. The gradient is packed as [dA(3), dB(3), dscale].
double capsule_sd(const ProjectedCapsule& pc, const Vec3& d, Eigen::Matrix<double, 1, 7>* grad) {
  // Project onto the plane normal to the ray; the distance becomes a
  // point-to-segment distance there.
  const Vec3 pa = pc.a - pc.a.dot(d) * d;
  const Vec3 e = pc.b - pc.a;
  const Vec3 pe = e - e.dot(d) * d;
  const double l2 = pe.squaredNorm();
  double t = 0.0;
  if (l2 > 1e-18) t = std::clamp(-pa.dot(pe) / l2, 0.0, 1.0);
  const Vec3 x = pa + t * pe;
  const double dist = x.norm();
  const double sd = (dist - pc.radius) * pc.px_per_mm;
  if (grad) {
    // t minimizes dist, so only the explicit dependence remains.
    const Vec3 n = dist > 1e-12 ? Vec3(x / dist) : Vec3::Zero();
    const Vec3 g_a = (1.0 - t) * pc.px_per_mm * n;
    const Vec3 g_b = t * pc.px_per_mm * n;
    *grad << g_a.transpose(), g_b.transpose(), dist - pc.radius;
  }
  return sd;
}

Vec3 pixel_ray(const CameraIntrinsics& cam, int u, int v) {
  return Vec3((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0).normalized();
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Soft silhouette of one view; with `dl_ds` also accumulates dL/dparams.
struct ViewRender {
  std::vector<double> s;
  std::array<std::vector<double>, 3> parts;
  std::array<ProjectedCapsule, 3> caps;
};

constexpr double kCutoff = 25.0;  // logistic scales beyond which the edge counts as zero

ViewRender render_soft(const ComponentPoses& poses, const GeometryParams& geo, const CameraIntrinsics& cam,
                       const RigidTransform& T_view, double width, PoseMode mode) {
  ViewRender out;
  const std::size_t n = static_cast<std::size_t>(cam.width) * cam.height;
  const auto capsules = part_capsules(poses, geo);
  std::vector<double> keep(n, 1.0);  // prod (1 - S_k)
  for (int k = 0; k < 3; ++k) {
    ProjectedCapsule& pc = out.caps[k];
    pc = project_capsule(capsules[k], k, poses, cam, T_view, kCutoff * width, mode);
    auto& sk = out.parts[k];
    sk.assign(n, 0.0);
    for (int v = pc.v0; v <= pc.v1; ++v) {
      for (int u = pc.u0; u <= pc.u1; ++u) {
        const std::size_t i = static_cast<std::size_t>(v) * cam.width + u;
        sk[i] = logistic(-capsule_sd(pc, pixel_ray(cam, u, v), nullptr) / width);
        keep[i] *= 1.0 - sk[i];
      }
    }
  }
  out.s.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.s[i] = 1.0 - keep[i];
  return out;
}

// Gradient of the silhouette terms; with `curvature`, also adds the
// Gauss-Newton matrix of the squared-error term.
void silhouette_gradient(const ViewRender& r, const std::vector<double>& dl_ds, const CameraIntrinsics& cam,
                         double width, double mse_weight, Eigen::VectorXd& grad, Eigen::MatrixXd* curvature) {
  const Eigen::Index np = grad.size();
  const std::size_t n = dl_ds.size();
  Eigen::MatrixXd ds = Eigen::MatrixXd::Zero(np, static_cast<Eigen::Index>(n));
  std::vector<std::size_t> touched;
  std::vector<char> seen(n, 0);
  for (int k = 0; k < 3; ++k) {
    const ProjectedCapsule& pc = r.caps[k];
    for (int v = pc.v0; v <= pc.v1; ++v) {
      for (int u = pc.u0; u <= pc.u1; ++u) {
        const std::size_t i = static_cast<std::size_t>(v) * cam.width + u;
        const double sk = r.parts[k][i];
        if (sk == 0.0) continue;
        double others = 1.0;
        for (int j = 0; j < 3; ++j) {
          if (j != k) others *= 1.0 - r.parts[j][i];
        }
        const double dsk_dsd = -sk * (1.0 - sk) / width;
        if (dsk_dsd == 0.0 || others == 0.0) continue;
        Eigen::Matrix<double, 1, 7> g;
        capsule_sd(pc, pixel_ray(cam, u, v), &g);
        // [A, B, scale] -> group parameters
        const Eigen::Matrix<double, 1, 6> dp = g.segment<3>(0) * pc.ja + g.segment<3>(3) * pc.jb + g(6) * pc.jscale;
        ds.col(static_cast<Eigen::Index>(i)).segment<6>(6 * pc.group) += (others * dsk_dsd) * dp.transpose();
        if (!seen[i]) {
          seen[i] = 1;
          touched.push_back(i);
        }
      }
    }
  }
  for (std::size_t i : touched) {
    const auto col = ds.col(static_cast<Eigen::Index>(i));
    grad += dl_ds[i] * col;
    if (curvature) *curvature += (2.0 * mse_weight) * col * col.transpose();
  }
}

struct KeypointJacobian {
  Vec2 uv;
  Eigen::Matrix<double, 2, 6> j;
  int group = 0;
};

KeypointJacobian project_keypoint(const KeypointLayout::Entry& entry, const ComponentPoses& poses,
                                  const CameraIntrinsics& cam, const RigidTransform& T_view, PoseMode mode) {
  const int part = part_index(entry.part);
  const Vec3 p = part_pose(poses, part).apply(entry.local);
  const Vec3 q = to_view(T_view, p);
  KeypointJacobian kj;
  kj.uv = Vec2(cam.fx * q.x() / q.z() + cam.cx, cam.fy * q.y() / q.z() + cam.cy);
  kj.j = projection_jacobian(cam, q) * T_view.rotation_matrix() * point_jacobian(p, pivot_of(poses, part, mode));
  kj.group = group_of(part, mode);
  return kj;
}

}  // namespace

ComponentPoses apply_pose_update(const ComponentPoses& poses, const Eigen::VectorXd& params, PoseMode mode,
                                 double jaw_length) {
  if (params.size() != static_cast<Eigen::Index>(pose_parameter_count(mode))) {
    throw Error(ErrorCode::InvalidConfig, "pose parameter vector has the wrong size");
  }
  std::array<RigidTransform, 3> moved;
  for (int k = 0; k < 3; ++k) {
    const int g = group_of(k, mode);
    const RigidTransform pivot = RigidTransform::from_translation(pivot_of(poses, k, mode));
    const Twist xi = Twist::from_vector(params.segment<6>(6 * g));
    moved[k] = pivot * se3_exp(xi) * pivot.inverse() * part_pose(poses, k);
  }
  ComponentPoses out;
  out.jaw1 = moved[0];
  out.jaw2 = moved[1];
  out.hinge = moved[2];
  out.tcp = tcp_from_jaws(out.jaw1, out.jaw2, jaw_length);
  return out;
}

std::vector<double> soft_silhouette(const ComponentPoses& poses, const GeometryParams& geo, const CameraIntrinsics& cam,
                                    const RigidTransform& T_view, double edge_width) {
  return render_soft(poses, geo, cam, T_view, edge_width, PoseMode::Rigid).s;
}

SmoothedLoss smoothed_alignment_loss(const ComponentPoses& poses, const FeatureObservation& reference,
                                     const std::array<DistanceField, 2>& fields, const RefineScene& scene,
                                     const RefineOptions& opts, bool with_gradient) {
  const LossWeights& w = opts.weights;
  SmoothedLoss out;
  const std::size_t np = pose_parameter_count(opts.mode);
  out.gradient = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(np));
  if (with_gradient) out.curvature = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(np), static_cast<Eigen::Index>(np));
  const double k_total = static_cast<double>(scene.layout.size());

  for (int view = 0; view < 2; ++view) {
    const CameraIntrinsics& cam = view == 0 ? scene.rig.left : scene.rig.right;
    const RigidTransform T_view = view == 0 ? RigidTransform::identity() : scene.rig.right_from_left;
    const PartMask& ref_mask = view == 0 ? reference.mask_left : reference.mask_right;
    const KeypointSet& ref_kps = view == 0 ? reference.keypoints_left : reference.keypoints_right;
    if (ref_mask.width != cam.width || ref_mask.height != cam.height) {
      throw Error(ErrorCode::ResolutionMismatch, "reference mask does not match the camera resolution");
    }
    if (ref_kps.size() != scene.layout.size()) {
      throw Error(ErrorCode::ResolutionMismatch, "reference keypoints do not match the layout");
    }

    const ViewRender r = render_soft(poses, scene.geometry, cam, T_view, opts.edge_width, opts.mode);
    std::vector<double> dl_ds;
    LossTerms t = silhouette_terms(r.s, ref_mask, fields[view], w, with_gradient ? &dl_ds : nullptr);
    if (with_gradient) silhouette_gradient(r, dl_ds, cam, opts.edge_width, w.mse, out.gradient, &out.curvature);

    for (std::size_t j = 0; j < scene.layout.size(); ++j) {
      if (!ref_kps[j].rho) continue;
      const KeypointJacobian kj = project_keypoint(scene.layout.entries[j], poses, cam, T_view, opts.mode);
      const Vec2 res = kj.uv - Vec2(ref_kps[j].x, ref_kps[j].y);
      const double rho = ref_kps[j].rho / k_total;
      t.kpt += rho * (smooth_l1(res.x(), w.beta) + smooth_l1(res.y(), w.beta));
      if (with_gradient) {
        const Vec2 d(smooth_l1_derivative(res.x(), w.beta), smooth_l1_derivative(res.y(), w.beta));
        out.gradient.segment<6>(6 * kj.group) += (w.kpt * rho) * (kj.j.transpose() * d);
        // secant curvature of the Smooth-L1, sl1'(r) / r
        for (int c = 0; c < 2; ++c) {
          const double cw = w.kpt * rho / std::max(std::abs(res(c)), std::max(w.beta, 1e-12));
          out.curvature.block<6, 6>(6 * kj.group, 6 * kj.group) += cw * kj.j.row(c).transpose() * kj.j.row(c);
        }
      }
    }
    t.total = w.mse * t.mse + w.dist * t.dist + w.scale * t.scale + w.kpt * t.kpt;
    out.terms += t;
  }
  out.value = out.terms.total;
  return out;
}

namespace {

// Mean keypoint Gauss-Newton matrix: sqrt(x^T H x) is the RMS keypoint
// displacement in px caused by parameter change x.
Eigen::MatrixXd keypoint_gauss_newton(const ComponentPoses& poses, const FeatureObservation& reference,
                                const RefineScene& scene, PoseMode mode) {
  const Eigen::Index np = static_cast<Eigen::Index>(pose_parameter_count(mode));
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(np, np);
  int visible = 0;
  for (int view = 0; view < 2; ++view) {
    const CameraIntrinsics& cam = view == 0 ? scene.rig.left : scene.rig.right;
    const RigidTransform T_view = view == 0 ? RigidTransform::identity() : scene.rig.right_from_left;
    const KeypointSet& ref_kps = view == 0 ? reference.keypoints_left : reference.keypoints_right;
    for (std::size_t j = 0; j < scene.layout.size(); ++j) {
      if (!ref_kps[j].rho) continue;
      const KeypointJacobian kj = project_keypoint(scene.layout.entries[j], poses, cam, T_view, mode);
      h.block<6, 6>(6 * kj.group, 6 * kj.group) += kj.j.transpose() * kj.j;
      ++visible;
    }
  }
  if (visible > 0) h /= visible;
  // Directions the keypoints cannot see (a jaw spinning about its own axis)
  // still get a finite step bound.
  const double floor = 1e-3 * std::max(h.diagonal().maxCoeff(), 1.0);
  h.diagonal().array() += floor;
  return h;
}

}  // namespace

PoseRefinement refine_pose_gd(const ComponentPoses& init, const FeatureObservation& reference, const RefineScene& scene,
                              const RefineOptions& opts) {
  opts.validate();
  const std::array<DistanceField, 2> fields{distance_field(reference.mask_left, opts.weights.gamma),
                                            distance_field(reference.mask_right, opts.weights.gamma)};
  PoseRefinement out;
  out.poses = init;
  out.poses.tcp = tcp_from_jaws(init.jaw1, init.jaw2, scene.geometry.jaw_length);
  SmoothedLoss cur = smoothed_alignment_loss(out.poses, reference, fields, scene, opts);
  out.loss_trace.push_back(cur.value);
  const Eigen::MatrixXd h = keypoint_gauss_newton(out.poses, reference, scene, opts.mode);

  double alpha = opts.step;
  int rising = 0;
  for (int it = 0; it < opts.n_opt; ++it) {
    // Variable metric: Gauss-Newton matrix of the squared silhouette error
    // plus the secant curvature of the keypoint term, floored so that
    // directions neither term sees stay bounded.
    Eigen::MatrixXd m = cur.curvature;
    const double floor = 1e-6 * std::max(m.diagonal().maxCoeff(), 1e-12);
    m.diagonal().array() += floor;
    const Eigen::VectorXd dir = -m.ldlt().solve(cur.gradient);
    const double slope = cur.gradient.dot(dir);
    if (!(slope < 0.0)) {
      out.early_stop = true;
      break;
    }
    // Trust region: no step moves the keypoints by more than max_step_px RMS.
    const double dir_px = std::sqrt(dir.dot(h * dir));
    if (dir_px > 0.0) alpha = std::min(alpha, opts.max_step_px / dir_px);
    bool accepted = false;
    ComponentPoses next;
    double next_value = 0.0;
    for (int k = 0; k < opts.max_backtracks; ++k, alpha *= 0.5) {
      next = apply_pose_update(out.poses, alpha * dir, opts.mode, scene.geometry.jaw_length);
      next_value = smoothed_alignment_loss(next, reference, fields, scene, opts, false).value;
      if (next_value <= cur.value + opts.armijo * alpha * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      out.early_stop = true;
      break;
    }
    const double decrease = cur.value - next_value;
    rising = decrease < 0.0 ? rising + 1 : 0;
    if (rising >= 5) throw Error(ErrorCode::DivergenceDetected, "loss rose on five consecutive accepted steps");

    out.poses = next;
    cur = smoothed_alignment_loss(out.poses, reference, fields, scene, opts);
    out.loss_trace.push_back(cur.value);
    out.iterations = it + 1;
    if (decrease < opts.min_decrease) {
      out.early_stop = true;
      break;
    }
    alpha = std::min(2.0 * alpha, 1.0);
  }
  out.final_terms = cur.terms;
  return out;
}

ComponentPoses offset_at_tcp(const ComponentPoses& poses, const RigidTransform& offset) {
  const RigidTransform at = RigidTransform::from_translation(poses.tcp.translation);
  const RigidTransform d = at * offset * at.inverse();
  return {d * poses.jaw1, d * poses.jaw2, d * poses.hinge, d * poses.tcp};
}

RigidTransform random_offset(double translation, double angle, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  auto direction = [&] {
    Vec3 v;
    do {
      v = Vec3(n(rng), n(rng), n(rng));
    } while (v.norm() < 1e-9);
    return Vec3(v.normalized());
  };
  const Vec3 axis = direction();
  return {UnitQuaternion::about_axis(axis, angle), translation * direction()};
}

RigidTransform working_point_bias(double translation, double angle, double depth, std::mt19937_64& rng) {
  const RigidTransform at = RigidTransform::from_translation(Vec3(0.0, 0.0, depth));
  return at * random_offset(translation, angle, rng) * at.inverse();
}

RigidTransform fit_bias_correction(std::span<const BiasSample> buffer, const BiasOptions& opts) {
  if (buffer.size() < opts.min_samples || buffer.empty()) {
    throw Error(ErrorCode::InsufficientSamples, "bias correction needs at least " + std::to_string(opts.min_samples) +
                                                    " samples, got " + std::to_string(buffer.size()));
  }
  std::vector<RigidTransform> candidates;
  candidates.reserve(buffer.size());
  for (const auto& s : buffer) candidates.push_back(s.pseudo * s.observed.inverse());
  return robust_refine(candidates, initial_extrinsic(candidates), opts.robust).estimate;
}

void AdaptationConfig::validate() const {
  if (!(bias_t >= 0.0) || !(bias_r_deg >= 0.0) || !(noise_t >= 0.0) || !(noise_r_deg >= 0.0))
    throw Error(ErrorCode::InvalidConfig, "adaptation: bias and noise must be non-negative");
  if (!(working_depth > 0.0)) throw Error(ErrorCode::InvalidConfig, "adaptation.working_depth must be positive");
  refine.validate();
}

AdaptationReport run_bias_adaptation(const SamplerConfig& sampler, const SceneConfig& scene,
                                     const AdaptationConfig& cfg, std::uint64_t seed, int workers) {
  cfg.validate();
  AdaptationReport rep;
  std::mt19937_64 bias_rng = named_rng(seed, "bias", 0);
  rep.bias = working_point_bias(cfg.bias_t, deg2rad(cfg.bias_r_deg), cfg.working_depth, bias_rng);

  const std::size_t total = cfg.buffer + cfg.held_out;
  const auto records = generate_dataset(sampler, scene, total, seed, workers);
  const RefineScene rs = RefineScene::from(scene);

  // observed poses move every component by the same left transform
  std::vector<ComponentPoses> observed(total);
  for (std::size_t i = 0; i < total; ++i) {
    std::mt19937_64 rng = named_rng(seed, "observer", i);
    std::normal_distribution<double> n(0.0, 1.0);
    Twist xi;
    for (int k = 0; k < 3; ++k) xi.rho(k) = n(rng) * cfg.noise_t / std::sqrt(3.0);
    for (int k = 0; k < 3; ++k) xi.phi(k) = n(rng) * deg2rad(cfg.noise_r_deg) / std::sqrt(3.0);
    const auto& r = records[i];
    const RigidTransform move = rep.bias * r.tcp * se3_exp(xi) * r.tcp.inverse();
    observed[i] = {move * r.jaw1, move * r.jaw2, move * r.hinge, move * r.tcp};
  }

  std::vector<std::optional<ComponentPoses>> pseudo(cfg.buffer);
  parallel_for(cfg.buffer, workers, [&](std::size_t i) {
    try {
      pseudo[i] = refine_pose_gd(observed[i], observation_from_record(records[i]), rs, cfg.refine).poses;
    } catch (const Error&) {
      // a diverged or degenerate refinement leaves the sample out
    }
  });

  std::vector<BiasSample> buffer;
  for (std::size_t i = 0; i < cfg.buffer; ++i) {
    if (!pseudo[i]) {
      ++rep.failed;
      continue;
    }
    buffer.push_back({observed[i].tcp, pseudo[i]->tcp});
    rep.pseudo_t += (pseudo[i]->tcp.translation - records[i].tcp.translation).norm();
    rep.pseudo_r_deg += rotation_error_deg(pseudo[i]->tcp.rotation, records[i].tcp.rotation);
  }
  rep.samples = buffer.size();
  if (rep.samples > 0) {
    rep.pseudo_t /= static_cast<double>(rep.samples);
    rep.pseudo_r_deg /= static_cast<double>(rep.samples);
  }
  rep.correction = fit_bias_correction(buffer, cfg.fit);

  for (std::size_t i = cfg.buffer; i < total; ++i) {
    const RigidTransform& truth = records[i].tcp;
    const RigidTransform& seen = observed[i].tcp;
    const RigidTransform fixed = rep.correction * seen;
    rep.before_t += (seen.translation - truth.translation).norm();
    rep.before_r_deg += rotation_error_deg(seen.rotation, truth.rotation);
    rep.after_t += (fixed.translation - truth.translation).norm();
    rep.after_r_deg += rotation_error_deg(fixed.rotation, truth.rotation);
  }
  if (cfg.held_out > 0) {
    const double n = static_cast<double>(cfg.held_out);
    rep.before_t /= n;
    rep.before_r_deg /= n;
    rep.after_t /= n;
    rep.after_r_deg /= n;
  }
  return rep;
}

}  // namespace cmvs
