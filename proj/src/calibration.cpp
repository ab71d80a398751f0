#include "cmvs/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Cholesky>

#include "cmvs/dataset.hpp"
#include "cmvs/error.hpp"

namespace cmvs {

RobustOptions RobustOptions::least_squares() {
  RobustOptions opts;
  opts.huber_delta = std::numeric_limits<double>::infinity();
  return opts;
}

void RobustOptions::validate() const {
  if (!(weights.minCoeff() > 0.0)) throw Error(ErrorCode::InvalidConfig, "calibration weights must be positive");
  if (!(huber_delta > 0.0)) throw Error(ErrorCode::InvalidConfig, "calibration huber_delta must be positive");
  if (max_iters < 1) throw Error(ErrorCode::InvalidConfig, "calibration max_iters must be positive");
  if (!(tol > 0.0)) throw Error(ErrorCode::InvalidConfig, "calibration tol must be positive");
}

RigidTransform extrinsic_candidate(const CalibrationObservation& obs) { return obs.cam_jaw * obs.base_jaw.inverse(); }

std::vector<RigidTransform> extrinsic_candidates(std::span<const CalibrationObservation> obs) {
  std::vector<RigidTransform> out;
  out.reserve(obs.size());
  for (const auto& o : obs) out.push_back(extrinsic_candidate(o));
  return out;
}

RigidTransform initial_extrinsic(std::span<const RigidTransform> candidates) {
  if (candidates.empty()) throw Error(ErrorCode::EmptyInput, "initial_extrinsic needs at least one candidate");
  Vec3 mean = Vec3::Zero();
  std::vector<UnitQuaternion> rotations;
  rotations.reserve(candidates.size());
  for (const auto& c : candidates) {
    mean += c.translation;
    rotations.push_back(c.rotation);
  }
  return {quaternion_average(rotations), mean / static_cast<double>(candidates.size())};
}

namespace {

double huber(double r, double delta) { return r <= delta ? 0.5 * r * r : delta * (r - 0.5 * delta); }

}  // namespace

double robust_objective(std::span<const RigidTransform> candidates, const RigidTransform& x, const RobustOptions& opts) {
  const RigidTransform inv = x.inverse();
  double total = 0.0;
  for (const auto& c : candidates) {
    const Vec6 r = opts.weights.cwiseProduct(se3_log(inv * c).vector());
    total += huber(r.norm(), opts.huber_delta);
  }
  return total;
}

RefineResult robust_refine(std::span<const RigidTransform> candidates, const RigidTransform& x0,
                           const RobustOptions& opts) {
  if (candidates.empty()) throw Error(ErrorCode::EmptyInput, "robust_refine needs at least one candidate");
  opts.validate();
  const Mat6 w = opts.weights.asDiagonal();

  RefineResult result;
  RigidTransform x = x0;
  double objective = robust_objective(candidates, x, opts);
  result.objective_trace.push_back(objective);

  for (int it = 0; it < opts.max_iters; ++it) {
    // Residual of X * exp(d): log(exp(-d) X^-1 C) ~ xi - J_l^-1(xi) d.
    Mat6 h = Mat6::Zero();
    Vec6 g = Vec6::Zero();
    const RigidTransform inv = x.inverse();
    for (const auto& c : candidates) {
      const Twist xi = se3_log(inv * c);
      const Vec6 r = w * xi.vector();
      const double n = r.norm();
      const double weight = n <= opts.huber_delta ? 1.0 : opts.huber_delta / n;
      const Mat6 a = w * se3_left_jacobian_inverse(xi);
      h += weight * a.transpose() * a;
      g += weight * a.transpose() * r;
    }
    const Vec6 delta = h.ldlt().solve(g);
    result.iterations = it + 1;

    bool accepted = false;
    double scale = 1.0;
    for (int k = 0; k < 40; ++k, scale *= 0.5) {
      const RigidTransform candidate = x * se3_exp(Twist::from_vector(scale * delta));
      const double obj = robust_objective(candidates, candidate, opts);
      if (obj <= objective) {
        x = candidate;
        objective = obj;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // No descent left at machine precision.
      result.converged = true;
      break;
    }
    result.objective_trace.push_back(objective);
    if ((scale * delta).norm() < opts.tol) {
      result.converged = true;
      break;
    }
  }

  result.estimate = x;
  const RigidTransform inv = x.inverse();
  for (const auto& c : candidates) {
    const double n = opts.weights.cwiseProduct(se3_log(inv * c).vector()).norm();
    result.residual_norms.push_back(n);
    result.weights.push_back(n <= opts.huber_delta ? 1.0 : opts.huber_delta / n);
  }
  return result;
}

Spread candidate_spread(std::span<const RigidTransform> candidates, const RigidTransform& reference) {
  Spread s;
  if (candidates.empty()) return s;
  double t2 = 0.0, r2 = 0.0;
  for (const auto& c : candidates) {
    t2 += (c.translation - reference.translation).squaredNorm();
    const double r = rotation_error_deg(c.rotation, reference.rotation);
    r2 += r * r;
  }
  s.translation = std::sqrt(t2 / candidates.size());
  s.rotation_deg = std::sqrt(r2 / candidates.size());
  return s;
}

namespace {

Vec3 random_direction(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 v;
  do {
    v = Vec3(n(rng), n(rng), n(rng));
  } while (v.norm() < 1e-9);
  return v.normalized();
}

}  // namespace

std::vector<CalibrationObservation> synthesize_calibration(const RigidTransform& x_true, const SyntheticCalibration& cfg,
                                                           const GeometryParams& geo, std::mt19937_64& rng) {
  if (cfg.sigma_t < 0.0 || cfg.sigma_r_deg < 0.0 || cfg.outlier_fraction < 0.0 || cfg.outlier_fraction > 1.0) {
    throw Error(ErrorCode::InvalidConfig, "synthetic calibration noise parameters out of range");
  }
  const SamplerConfig sampler = SamplerConfig::defaults();
  // Per-axis standard deviations giving the requested 3-D RMS.
  std::normal_distribution<double> nt(0.0, cfg.sigma_t / std::sqrt(3.0));
  std::normal_distribution<double> nr(0.0, deg2rad(cfg.sigma_r_deg) / std::sqrt(3.0));

  std::vector<CalibrationObservation> out;
  out.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    const JointConfig q = sample_joint_config(sampler, rng);
    const RigidTransform base_jaw = forward_kinematics(q, geo).jaw1;
    const Twist n{Vec3(nt(rng), nt(rng), nt(rng)), Vec3(nr(rng), nr(rng), nr(rng))};
    out.push_back({x_true * se3_exp(n) * base_jaw, base_jaw, i});
  }

  const auto n_out = static_cast<std::size_t>(std::lround(cfg.outlier_fraction * cfg.count));
  std::vector<std::size_t> order(cfg.count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t k = 0; k < n_out; ++k) {
    auto& o = out[order[k]];
    const RigidTransform gross{UnitQuaternion::about_axis(random_direction(rng), deg2rad(cfg.outlier_r_deg)),
                               cfg.outlier_t * random_direction(rng)};
    o.cam_jaw = x_true * gross * x_true.inverse() * o.cam_jaw;
  }
  return out;
}

}  // namespace cmvs
