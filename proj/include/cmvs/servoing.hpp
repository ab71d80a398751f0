#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "cmvs/dataset.hpp"
#include "cmvs/differential.hpp"
#include "cmvs/kinematics.hpp"

namespace cmvs {

enum class ObserverMode { Truth, Noisy, Biased, Refined };
enum class PoseFrame { Base, Camera };

struct ObservedPose {
  RigidTransform pose;
  PoseFrame frame = PoseFrame::Camera;
};

/// TCP pose source. Noise is exp of a Gaussian twist in the tool frame with
/// sigma_t / sigma_r the RMS of the 3-D translation / rotation (not per axis).
struct PoseObserver {
  ObserverMode mode = ObserverMode::Truth;
  double sigma_t = 0.0;      // mm
  double sigma_r_deg = 0.0;  // deg
  /// Left-multiplied on the camera-frame pose in Biased and Refined modes.
  RigidTransform bias;
  /// Refined mode applies this on top of the biased pose.
  RigidTransform correction;
  RigidTransform cam_from_base;

  static PoseObserver truth();
  static PoseObserver noisy(double sigma_t = 0.83, double sigma_r_deg = 2.76);
  static PoseObserver biased(const RigidTransform& bias, double sigma_t = 0.83, double sigma_r_deg = 2.76);
  static PoseObserver refined(const RigidTransform& bias, const RigidTransform& correction, double sigma_t = 0.83,
                              double sigma_r_deg = 2.76);

  /// Camera-frame observation of the true base-frame TCP pose.
  ObservedPose observe(const RigidTransform& base_tcp, std::mt19937_64& rng) const;
  RigidTransform to_base(const ObservedPose& obs) const;
  void validate() const;
};

/// Per joint dead-band (q1 in mm, the rest in rad) and gain error.
struct HysteresisParams {
  double backlash_rad = 0.01;
  double backlash_mm = 0.2;
  /// Gains drawn uniformly from [1 - spread, 1 + spread].
  double gain_spread = 0.1;
  /// Scales the dead-band of the jaw joints q6, q7 relative to backlash_rad.
  double jaw_factor = 1.0;
};

/// Simulated robot. Commands are joint increments applied to the motor side;
/// the distal joints follow through a dead-band and a gain.
class PlantModel {
 public:
  static PlantModel ideal(const JointConfig& start, const JointLimits& limits = JointLimits::mechanism());
  static PlantModel with_hysteresis(const JointConfig& start, const HysteresisParams& params, std::mt19937_64& rng,
                                    const JointLimits& limits = JointLimits::mechanism());

  const JointConfig& state() const { return q_; }
  const std::array<double, 7>& backlash() const { return backlash_; }
  const std::array<double, 7>& gain() const { return gain_; }
  bool is_ideal() const;

  /// Returns the realized increment.
  JointConfig apply(const JointConfig& command);

 private:
  JointConfig q_;
  JointLimits limits_;
  std::array<double, 7> backlash_{};
  std::array<double, 7> gain_{1, 1, 1, 1, 1, 1, 1};
  std::array<double, 7> motor_{};
  std::array<double, 7> output_{};
};

struct ServoOptions {
  double gain = 0.05;
  double tol_t = 1.0;    // mm
  double tol_r = 0.05;   // rad
  int max_iters = 500;
  double control_interval = 0.05;  // s
  double damping = 1e-3;
  double opening = deg2rad(20.0);  // jaw opening held while servoing
  IkOptions ik;

  /// Marker-tracking thresholds (1 mm / 0.05 rad).
  static ServoOptions marker();
  /// Thresholds for the learned estimator (2.5 mm / 0.127 rad).
  static ServoOptions model();
  void validate() const;
};

struct ServoSample {
  double model_t = 0;      // |e_p| from the observed pose, mm
  double model_r_deg = 0;  // |e_R| from the observed pose, deg
  double truth_t = 0;
  double truth_r_deg = 0;
};

struct ServoResult {
  /// One sample per observation; the last one decides convergence.
  std::vector<ServoSample> trace;
  bool converged = false;
  int iterations = 0;
  double elapsed_s = 0;
  JointConfig final_q;

  double final_t() const { return trace.empty() ? 0.0 : trace.back().truth_t; }
  double final_r_deg() const { return trace.empty() ? 0.0 : trace.back().truth_r_deg; }
};

/// e = (R_obs p_err, R_obs rotvec(R_err)) with T_err = T_obs^-1 T_target.
/// Throws AngleAtSingularity when T_err rotates by pi.
Vec6 pose_error(const RigidTransform& T_obs, const RigidTransform& T_target);

struct ServoStep {
  /// J^+ (alpha e) in task coordinates before clamping.
  Vec6 raw = Vec6::Zero();
  /// Joint increment after clamping the commanded pose to the limits.
  JointConfig dq;
  bool clamped = false;
};

ServoStep servo_step(const JointConfig& q, const Vec6& e, const ServoOptions& opts, const GeometryParams& geo,
                     const JointLimits& limits = JointLimits::mechanism());

/// Observe, recover q by IK from the observation, step, until the observed
/// error is below both thresholds or max_iters steps were taken. The plant
/// keeps its state so consecutive calls continue from where the last stopped.
ServoResult run_point_reaching(const RigidTransform& target, const PoseObserver& observer, PlantModel& plant,
                               const ServoOptions& opts, const GeometryParams& geo, std::mt19937_64& rng);

/// `count` poses evenly spaced by arc length around a closed square of side
/// `side` in the base y-z plane centred on `centre`, all with its rotation.
/// The first and last coincide with the corner (-side/2, -side/2).
std::vector<RigidTransform> square_trajectory(const RigidTransform& centre, double side, int count = 127);

enum class TrajectoryMode { ClosedLoop, OpenLoop };

struct TrajectoryResult {
  std::vector<ServoResult> targets;
  /// Ground-truth error at each target after the controller moved on.
  std::vector<double> error_t;
  std::vector<double> error_r_deg;
  double mean_t = 0, std_t = 0;
  double mean_r_deg = 0, std_r_deg = 0;
};

/// Open loop commands the IK solution of each target once, as increments
/// from the previous command; closed loop servoes to each target in turn.
TrajectoryResult run_trajectory(const std::vector<RigidTransform>& targets, TrajectoryMode mode,
                                const PoseObserver& observer, PlantModel& plant, const ServoOptions& opts,
                                const GeometryParams& geo, std::mt19937_64& rng);

/// Defaults of the two evaluation tasks.
struct ServoTasks {
  JointConfig point_start{10.0, 0.0, 0.2, 0.0, 0.2, deg2rad(10.0), -deg2rad(10.0)};
  JointConfig point_target{18.0, 0.15, 0.45, -0.2, 0.5, 0.1 + deg2rad(10.0), 0.1 - deg2rad(10.0)};
  /// Each point trial starts uniformly within +-jitter of point_start
  /// (q1 in mm, the other task variables in rad).
  double start_jitter_mm = 1.0;
  double start_jitter_rad = 0.05;
  JointConfig square_centre{15.0, 0.0, 0.3, 0.0, 0.3, deg2rad(10.0), -deg2rad(10.0)};
  double square_side = 40.0;
  int square_count = 127;
  HysteresisParams hysteresis;
  /// Dead-band that puts the open-loop square error near 13-14 mm.
  HysteresisParams square_hysteresis{0.22, 0.2, 0.1, 1.0};
};

struct TrialSummary {
  std::vector<ServoResult> runs;
  double mean_t = 0, std_t = 0;
  double mean_r_deg = 0, std_r_deg = 0;
  double converged_fraction = 0;
};

/// Independent point-reaching trials. Trial i draws its observer noise and
/// plant from named_rng(seed, ..., i); results do not depend on `workers`.
TrialSummary point_reaching_trials(const ServoTasks& tasks, const PoseObserver& observer, bool hysteresis,
                                   const ServoOptions& opts, const GeometryParams& geo, int trials, std::uint64_t seed,
                                   int workers = 1);

/// One square-trajectory run from the exact IK configuration of the first target.
TrajectoryResult square_task(const ServoTasks& tasks, TrajectoryMode mode, const PoseObserver& observer,
                             bool hysteresis, const ServoOptions& opts, const GeometryParams& geo, std::uint64_t seed);

}  // namespace cmvs
