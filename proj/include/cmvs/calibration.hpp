#pragma once

#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "cmvs/kinematics.hpp"
#include "cmvs/se3.hpp"

namespace cmvs {

struct CalibrationObservation {
  RigidTransform cam_jaw;   // jaw pose measured in the camera frame
  RigidTransform base_jaw;  // jaw pose from forward kinematics
  std::size_t index = 0;
};

struct RobustOptions {
  /// Residual weights in twist order (rho, phi), roughly the inverse per-axis
  /// spread of candidates (4.3 mm, 0.84 deg) so that a typical inlier has a
  /// weighted norm near 2.4.
  Vec6 weights = (Vec6() << 0.23, 0.23, 0.23, 68.0, 68.0, 68.0).finished();
  /// Huber threshold on the weighted residual norm.
  double huber_delta = 3.0;
  int max_iters = 100;
  /// Stop once the update twist norm drops below this.
  double tol = 1e-12;

  /// Same weights without the robust kernel.
  static RobustOptions least_squares();
  void validate() const;
};

struct RefineResult {
  RigidTransform estimate;
  int iterations = 0;
  bool converged = false;
  /// Objective before the first step and after every accepted step.
  std::vector<double> objective_trace;
  /// Final weighted residual norm and IRLS weight per candidate.
  std::vector<double> residual_norms;
  std::vector<double> weights;
};

/// X_i = cam_jaw * base_jaw^-1.
RigidTransform extrinsic_candidate(const CalibrationObservation& obs);
std::vector<RigidTransform> extrinsic_candidates(std::span<const CalibrationObservation> obs);

/// Mean translation and averaged rotation. Throws EmptyInput.
RigidTransform initial_extrinsic(std::span<const RigidTransform> candidates);

/// Sum over candidates of huber(|W log(X^-1 C_i)|).
double robust_objective(std::span<const RigidTransform> candidates, const RigidTransform& x, const RobustOptions& opts);

/// Iteratively reweighted Gauss-Newton on SE(3) with backtracking. Running
/// out of iterations leaves converged = false and returns the best iterate.
RefineResult robust_refine(std::span<const RigidTransform> candidates, const RigidTransform& x0,
                           const RobustOptions& opts = {});

/// RMS translation (mm) and rotation (deg) of candidates about a reference.
struct Spread {
  double translation = 0;
  double rotation_deg = 0;
};
Spread candidate_spread(std::span<const RigidTransform> candidates, const RigidTransform& reference);

struct SyntheticCalibration {
  std::size_t count = 400;
  /// RMS of the 3-D translation / rotation perturbation (not per axis).
  double sigma_t = 7.5;
  double sigma_r_deg = 1.45;
  double outlier_fraction = 0.0;
  double outlier_t = 100.0;
  double outlier_r_deg = 30.0;
};

/// Observations of jaw 1 at random joint configurations seen through x_true:
/// cam_jaw = x_true * exp(n) * base_jaw with n Gaussian. A randomly chosen
/// round(outlier_fraction * count) of them get an extra perturbation of
/// exactly (outlier_t, outlier_r_deg) in random directions.
std::vector<CalibrationObservation> synthesize_calibration(const RigidTransform& x_true, const SyntheticCalibration& cfg,
                                                           const GeometryParams& geo, std::mt19937_64& rng);

}  // namespace cmvs
