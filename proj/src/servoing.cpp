#include "cmvs/servoing.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cmvs/error.hpp"
#include "cmvs/parallel.hpp"

namespace cmvs {

namespace {

std::array<double, 7> to_array(const JointConfig& q) { return q.as_array(); }

void mean_std(const std::vector<double>& v, double& mean, double& std) {
  mean = 0;
  std = 0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return;
  for (double x : v) std += (x - mean) * (x - mean);
  std = std::sqrt(std / static_cast<double>(v.size() - 1));
}

Twist gaussian_twist(double sigma_t, double sigma_r, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Twist xi;
  // per-axis sigma so that the 3-D RMS equals the given value
  for (int i = 0; i < 3; ++i) xi.rho(i) = n(rng) * sigma_t / std::sqrt(3.0);
  for (int i = 0; i < 3; ++i) xi.phi(i) = n(rng) * sigma_r / std::sqrt(3.0);
  return xi;
}

ServoSample sample_of(const Vec6& e_model, const Vec6& e_truth) {
  return {e_model.head<3>().norm(), rad2deg(e_model.tail<3>().norm()), e_truth.head<3>().norm(),
          rad2deg(e_truth.tail<3>().norm())};
}

JointConfig recover_q(const RigidTransform& observed, const JointConfig& guess, const ServoOptions& opts,
                      const GeometryParams& geo) {
  try {
    return solve_ik(observed, guess, geo, opts.ik).q;
  } catch (const IkNotConverged& e) {
    // an observation off the reachable set still has a nearest configuration
    return e.best().q;
  }
}

JointConfig with_opening(const JointConfig& q, double opening) { return JointConfig::from_task(q.task(), opening); }

}  // namespace

PoseObserver PoseObserver::truth() { return {}; }

PoseObserver PoseObserver::noisy(double sigma_t, double sigma_r_deg) {
  PoseObserver o;
  o.mode = ObserverMode::Noisy;
  o.sigma_t = sigma_t;
  o.sigma_r_deg = sigma_r_deg;
  return o;
}

PoseObserver PoseObserver::biased(const RigidTransform& bias, double sigma_t, double sigma_r_deg) {
  PoseObserver o = noisy(sigma_t, sigma_r_deg);
  o.mode = ObserverMode::Biased;
  o.bias = bias;
  return o;
}

PoseObserver PoseObserver::refined(const RigidTransform& bias, const RigidTransform& correction, double sigma_t,
                                   double sigma_r_deg) {
  PoseObserver o = biased(bias, sigma_t, sigma_r_deg);
  o.mode = ObserverMode::Refined;
  o.correction = correction;
  return o;
}

void PoseObserver::validate() const {
  if (!(sigma_t >= 0.0) || !(sigma_r_deg >= 0.0))
    throw Error(ErrorCode::InvalidConfig, "observer.sigma_t and observer.sigma_r_deg must be non-negative");
}

ObservedPose PoseObserver::observe(const RigidTransform& base_tcp, std::mt19937_64& rng) const {
  RigidTransform tcp = base_tcp;
  if (mode != ObserverMode::Truth && (sigma_t > 0.0 || sigma_r_deg > 0.0))
    tcp = tcp * se3_exp(gaussian_twist(sigma_t, deg2rad(sigma_r_deg), rng));
  RigidTransform cam = cam_from_base * tcp;
  if (mode == ObserverMode::Biased || mode == ObserverMode::Refined) cam = bias * cam;
  if (mode == ObserverMode::Refined) cam = correction * cam;
  return {cam, PoseFrame::Camera};
}

RigidTransform PoseObserver::to_base(const ObservedPose& obs) const {
  if (obs.frame == PoseFrame::Base) return obs.pose;
  return cam_from_base.inverse() * obs.pose;
}

PlantModel PlantModel::ideal(const JointConfig& start, const JointLimits& limits) {
  PlantModel p;
  p.q_ = start;
  p.limits_ = limits;
  p.motor_ = to_array(start);
  p.output_ = p.motor_;
  return p;
}

PlantModel PlantModel::with_hysteresis(const JointConfig& start, const HysteresisParams& params, std::mt19937_64& rng,
                                       const JointLimits& limits) {
  if (!(params.backlash_rad >= 0.0) || !(params.backlash_mm >= 0.0) || !(params.gain_spread >= 0.0) ||
      params.gain_spread >= 1.0 || !(params.jaw_factor >= 0.0))
    throw Error(ErrorCode::InvalidConfig, "plant: backlash and gain spread must be non-negative, spread < 1");
  PlantModel p = ideal(start, limits);
  p.backlash_ = {params.backlash_mm,  params.backlash_rad, params.backlash_rad, params.backlash_rad,
                 params.backlash_rad, params.jaw_factor * params.backlash_rad,
                 params.jaw_factor * params.backlash_rad};
  std::uniform_real_distribution<double> g(1.0 - params.gain_spread, 1.0 + params.gain_spread);
  for (auto& gi : p.gain_) gi = g(rng);
  return p;
}

bool PlantModel::is_ideal() const {
  for (int i = 0; i < 7; ++i) {
    if (backlash_[i] != 0.0 || gain_[i] != 1.0) return false;
  }
  return true;
}

JointConfig PlantModel::apply(const JointConfig& command) {
  const auto dq = to_array(command);
  auto q = to_array(q_);
  const auto before = q;
  for (int i = 0; i < 7; ++i) {
    motor_[i] += dq[i];
    double moved;
    if (backlash_[i] == 0.0) {
      moved = dq[i];
      output_[i] = motor_[i];
    } else {
      const double half = 0.5 * backlash_[i];
      const double prev = output_[i];
      if (motor_[i] - output_[i] > half) output_[i] = motor_[i] - half;
      else if (motor_[i] - output_[i] < -half) output_[i] = motor_[i] + half;
      moved = output_[i] - prev;
    }
    q[i] = limits_.joints[i].clamp(q[i] + gain_[i] * moved);
  }
  q_ = JointConfig::from_array(q);
  std::array<double, 7> realized;
  for (int i = 0; i < 7; ++i) realized[i] = q[i] - before[i];
  return JointConfig::from_array(realized);
}

ServoOptions ServoOptions::marker() { return {}; }

ServoOptions ServoOptions::model() {
  ServoOptions o;
  o.tol_t = 2.5;
  o.tol_r = 0.127;
  return o;
}

void ServoOptions::validate() const {
  if (!(gain >= 0.0)) throw Error(ErrorCode::InvalidConfig, "servo.gain must be non-negative");
  if (!(tol_t > 0.0) || !(tol_r > 0.0)) throw Error(ErrorCode::InvalidConfig, "servo thresholds must be positive");
  if (max_iters < 0) throw Error(ErrorCode::InvalidConfig, "servo.max_iters must be non-negative");
  if (!(control_interval > 0.0)) throw Error(ErrorCode::InvalidConfig, "servo.control_interval must be positive");
  if (!(damping >= 0.0)) throw Error(ErrorCode::InvalidConfig, "servo.damping must be non-negative");
}

Vec6 pose_error(const RigidTransform& T_obs, const RigidTransform& T_target) {
  const RigidTransform err = T_obs.inverse() * T_target;
  if (err.rotation.angle() > std::numbers::pi - 1e-6)
    throw Error(ErrorCode::AngleAtSingularity, "pose error rotation at pi");
  const Mat3 R = T_obs.rotation_matrix();
  Vec6 e;
  e << R * err.translation, R * err.rotation.rotation_vector();
  return e;
}

ServoStep servo_step(const JointConfig& q, const Vec6& e, const ServoOptions& opts, const GeometryParams& geo,
                     const JointLimits& limits) {
  ServoStep s;
  const Mat6 pinv = damped_pseudoinverse(geometric_jacobian(q, geo, limits), opts.damping);
  s.raw = pinv * (opts.gain * e);
  const Vec6 task = q.task();
  const Vec6 wanted = task + s.raw;
  const Vec6 allowed = limits.clamp_task(wanted, q.opening());
  s.clamped = allowed != wanted;
  const Vec6 d = allowed - task;
  s.dq = {d(0), d(1), d(2), d(3), d(4), d(5), d(5)};
  return s;
}

ServoResult run_point_reaching(const RigidTransform& target, const PoseObserver& observer, PlantModel& plant,
                               const ServoOptions& opts, const GeometryParams& geo, std::mt19937_64& rng) {
  opts.validate();
  observer.validate();
  ServoResult res;
  JointConfig guess = with_opening(plant.state(), opts.opening);
  for (int k = 0;; ++k) {
    const RigidTransform truth = forward_kinematics(plant.state(), geo).tcp;
    const RigidTransform seen = observer.to_base(observer.observe(truth, rng));
    const Vec6 e = pose_error(seen, target);
    res.trace.push_back(sample_of(e, pose_error(truth, target)));
    if (e.head<3>().norm() < opts.tol_t && e.tail<3>().norm() < opts.tol_r) {
      res.converged = true;
      break;
    }
    if (k == opts.max_iters) break;
    guess = recover_q(seen, guess, opts, geo);
    plant.apply(servo_step(guess, e, opts, geo).dq);
    ++res.iterations;
  }
  res.elapsed_s = res.iterations * opts.control_interval;
  res.final_q = plant.state();
  return res;
}

std::vector<RigidTransform> square_trajectory(const RigidTransform& centre, double side, int count) {
  if (count < 2) throw Error(ErrorCode::InvalidConfig, "trajectory needs at least 2 targets");
  if (!(side > 0.0)) throw Error(ErrorCode::InvalidConfig, "trajectory side must be positive");
  const double h = 0.5 * side;
  // corners in (y, z), counter-clockwise from (-h, -h)
  const std::array<Vec2, 5> corner{Vec2(-h, -h), Vec2(h, -h), Vec2(h, h), Vec2(-h, h), Vec2(-h, -h)};
  std::vector<RigidTransform> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const double s = 4.0 * side * i / (count - 1);
    const int edge = std::min(3, static_cast<int>(s / side));
    const double f = (s - edge * side) / side;
    const Vec2 yz = corner[edge] + f * (corner[edge + 1] - corner[edge]);
    out.push_back({centre.rotation, centre.translation + Vec3(0.0, yz.x(), yz.y())});
  }
  return out;
}

TrajectoryResult run_trajectory(const std::vector<RigidTransform>& targets, TrajectoryMode mode,
                                const PoseObserver& observer, PlantModel& plant, const ServoOptions& opts,
                                const GeometryParams& geo, std::mt19937_64& rng) {
  if (targets.size() < 2) throw Error(ErrorCode::InvalidConfig, "trajectory needs at least 2 targets");
  TrajectoryResult out;
  JointConfig command = with_opening(plant.state(), opts.opening);
  for (const auto& target : targets) {
    ServoResult r;
    if (mode == TrajectoryMode::ClosedLoop) {
      r = run_point_reaching(target, observer, plant, opts, geo, rng);
    } else {
      const JointConfig next = recover_q(target, command, opts, geo);
      const auto a = next.as_array(), b = command.as_array();
      std::array<double, 7> d;
      for (int i = 0; i < 7; ++i) d[i] = a[i] - b[i];
      plant.apply(JointConfig::from_array(d));
      command = next;
      const RigidTransform truth = forward_kinematics(plant.state(), geo).tcp;
      const Vec6 e_model = pose_error(forward_kinematics(command, geo).tcp, target);
      r.trace.push_back(sample_of(e_model, pose_error(truth, target)));
      r.final_q = plant.state();
    }
    out.error_t.push_back(r.final_t());
    out.error_r_deg.push_back(r.final_r_deg());
    out.targets.push_back(std::move(r));
  }
  mean_std(out.error_t, out.mean_t, out.std_t);
  mean_std(out.error_r_deg, out.mean_r_deg, out.std_r_deg);
  return out;
}

TrialSummary point_reaching_trials(const ServoTasks& tasks, const PoseObserver& observer, bool hysteresis,
                                   const ServoOptions& opts, const GeometryParams& geo, int trials, std::uint64_t seed,
                                   int workers) {
  if (trials < 0) throw Error(ErrorCode::InvalidConfig, "trials must be non-negative");
  const RigidTransform target = forward_kinematics(tasks.point_target, geo).tcp;
  TrialSummary s;
  s.runs.resize(static_cast<std::size_t>(trials));
  parallel_for(s.runs.size(), workers, [&](std::size_t i) {
    std::mt19937_64 plant_rng = named_rng(seed, "plant", i);
    std::mt19937_64 obs_rng = named_rng(seed, "observer", i);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Vec6 task = tasks.point_start.task();
    task(0) += tasks.start_jitter_mm * u(plant_rng);
    for (int j = 1; j < 6; ++j) task(j) += tasks.start_jitter_rad * u(plant_rng);
    const JointConfig start = JointConfig::from_task(task, tasks.point_start.opening());
    PlantModel plant = hysteresis ? PlantModel::with_hysteresis(start, tasks.hysteresis, plant_rng)
                                  : PlantModel::ideal(start);
    s.runs[i] = run_point_reaching(target, observer, plant, opts, geo, obs_rng);
  });
  std::vector<double> t, r;
  std::size_t ok = 0;
  for (const auto& run : s.runs) {
    t.push_back(run.final_t());
    r.push_back(run.final_r_deg());
    ok += run.converged;
  }
  mean_std(t, s.mean_t, s.std_t);
  mean_std(r, s.mean_r_deg, s.std_r_deg);
  s.converged_fraction = trials > 0 ? static_cast<double>(ok) / trials : 0.0;
  return s;
}

TrajectoryResult square_task(const ServoTasks& tasks, TrajectoryMode mode, const PoseObserver& observer,
                             bool hysteresis, const ServoOptions& opts, const GeometryParams& geo, std::uint64_t seed) {
  const auto targets =
      square_trajectory(forward_kinematics(tasks.square_centre, geo).tcp, tasks.square_side, tasks.square_count);
  const JointConfig start = solve_ik(targets.front(), tasks.square_centre, geo, opts.ik).q;
  std::mt19937_64 plant_rng = named_rng(seed, "plant", 0);
  std::mt19937_64 obs_rng = named_rng(seed, "observer", 0);
  PlantModel plant =
      hysteresis ? PlantModel::with_hysteresis(start, tasks.square_hysteresis, plant_rng) : PlantModel::ideal(start);
  return run_trajectory(targets, mode, observer, plant, opts, geo, obs_rng);
}

}  // namespace cmvs
