#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "cmvs/calibration.hpp"
#include "cmvs/camera.hpp"
#include "cmvs/dataset.hpp"

namespace cmvs {

/// Reference features of one stereo frame (masks and keypoints with visibility).
struct FeatureObservation {
  PartMask mask_left;
  PartMask mask_right;
  KeypointSet keypoints_left;
  KeypointSet keypoints_right;
};

FeatureObservation observation_from_record(const AnnotationRecord& rec);

/// Euclidean distance to the nearest foreground pixel divided by gamma.
struct DistanceField {
  int width = 0;
  int height = 0;
  double gamma = 1.0;
  std::vector<double> values;
  /// Set when the mask had no foreground; values then hold the image diagonal / gamma.
  bool empty_mask = false;

  double at(int u, int v) const { return values[static_cast<std::size_t>(v) * width + u]; }
};

/// Exact two-pass (Felzenszwalb-Huttenlocher) transform of the non-background pixels.
DistanceField distance_field(const PartMask& mask, double gamma);

struct LossWeights {
  double mse = 1.0;
  double dist = 1.0;
  double scale = 10.0;
  // Keypoint weight puts L_kpt on the scale of L_MSE at a 3 mm / 5 deg
  // offset (about 6 vs 150 summed over both views at 256 x 192).
  double kpt = 25.0;
  double beta = 0.01;    // Smooth-L1 transition, px
  double gamma = 10.0;   // distance field decay, px
  void validate() const;
};

struct LossTerms {
  double mse = 0;
  double dist = 0;
  double scale = 0;
  double kpt = 0;
  double total = 0;

  LossTerms& operator+=(const LossTerms& o);
};

double smooth_l1(double x, double beta);

/// One view. `silhouette` holds per-pixel foreground values in [0, 1]
/// (binary or soft); keypoints are rendered positions, visibility comes from
/// the reference.
LossTerms view_loss(std::span<const double> silhouette, std::span<const Vec2> keypoints, const PartMask& ref_mask,
                    const KeypointSet& ref_keypoints, const DistanceField& field, const LossWeights& w);

/// Sum of both views on binary rendered masks. Throws ResolutionMismatch.
LossTerms alignment_loss(const FeatureObservation& rendered, const FeatureObservation& reference,
                         const LossWeights& weights, const std::array<DistanceField, 2>& fields);

struct RefineScene {
  GeometryParams geometry;
  StereoRig rig;
  KeypointLayout layout;

  static RefineScene from(const SceneConfig& scene);
};

/// Rigid moves every component with one twist about the hinge pivot;
/// Independent gives jaw1, jaw2 and hinge a twist each about their own origin.
enum class PoseMode { Rigid, Independent };

struct RefineOptions {
  int n_opt = 100;
  double step = 1e-2;      // initial step, fraction of the metric step (grows up to 1)
  double armijo = 1e-4;
  double min_decrease = 1e-8;
  int max_backtracks = 40;
  /// Largest RMS keypoint displacement a single step may cause, px.
  double max_step_px = 1.0;
  double edge_width = 1.5;  // logistic scale of the soft silhouette, px
  LossWeights weights;
  PoseMode mode = PoseMode::Rigid;
  void validate() const;
};

std::size_t pose_parameter_count(PoseMode mode);

/// Poses (left camera frame) moved by the parameter vector. The TCP is rebuilt
/// from the moved jaws.
ComponentPoses apply_pose_update(const ComponentPoses& poses, const Eigen::VectorXd& params, PoseMode mode,
                                 double jaw_length);

/// Soft-silhouette rendering of one view, foreground values in [0, 1].
std::vector<double> soft_silhouette(const ComponentPoses& poses, const GeometryParams& geo, const CameraIntrinsics& cam,
                                    const RigidTransform& T_view, double edge_width);

struct SmoothedLoss {
  double value = 0;
  LossTerms terms;
  /// d value / d params at params = 0.
  Eigen::VectorXd gradient;
  /// Gauss-Newton style curvature used as the descent metric.
  Eigen::MatrixXd curvature;
};

/// Alignment loss of the soft rendering of `poses` against the reference.
SmoothedLoss smoothed_alignment_loss(const ComponentPoses& poses, const FeatureObservation& reference,
                                     const std::array<DistanceField, 2>& fields, const RefineScene& scene,
                                     const RefineOptions& opts, bool with_gradient = true);

struct PoseRefinement {
  ComponentPoses poses;
  /// Loss at the start and after every accepted step.
  std::vector<double> loss_trace;
  int iterations = 0;
  bool early_stop = false;
  LossTerms final_terms;
};

/// Preconditioned gradient descent with Armijo backtracking on the smoothed
/// loss. Throws DivergenceDetected if accepted steps ever raise the loss five
/// times in a row.
PoseRefinement refine_pose_gd(const ComponentPoses& init, const FeatureObservation& reference, const RefineScene& scene,
                              const RefineOptions& opts = {});

/// Moves every component rigidly by `offset` applied at the TCP position
/// (camera-aligned axes), so the TCP error equals the offset exactly.
ComponentPoses offset_at_tcp(const ComponentPoses& poses, const RigidTransform& offset);

/// Rotation of exactly `angle` rad about a random axis and translation of
/// exactly `translation` mm in a random direction.
RigidTransform random_offset(double translation, double angle, std::mt19937_64& rng);

/// Camera-frame bias that displaces a pose at (0, 0, depth) by exactly
/// (translation, angle): P offset P^-1 with P the translation to that point.
RigidTransform working_point_bias(double translation, double angle, double depth, std::mt19937_64& rng);

struct BiasSample {
  RigidTransform observed;
  RigidTransform pseudo;
};

struct BiasOptions {
  std::size_t min_samples = 150;
  RobustOptions robust;
};

/// Fixed left correction C with C * observed ~ pseudo, fitted by robust_refine
/// over the per-sample candidates pseudo * observed^-1. Throws InsufficientSamples.
RigidTransform fit_bias_correction(std::span<const BiasSample> buffer, const BiasOptions& opts = {});

/// Synthetic check of the correction: an observer whose camera-frame poses
/// are off by a fixed bias (given as an offset at the working point
/// (0, 0, working_depth)) plus tool-frame noise, pseudo ground truth from
/// refine_pose_gd against the rendered features, and held-out scenes to
/// compare TCP errors with and without the fitted correction.
struct AdaptationConfig {
  double bias_t = 2.0;        // mm
  double bias_r_deg = 3.0;
  double noise_t = 0.5;       // RMS of the 3-D observation noise, mm
  double noise_r_deg = 0.5;
  double working_depth = 250.0;
  std::size_t buffer = 150;
  std::size_t held_out = 50;
  RefineOptions refine;
  BiasOptions fit;
  void validate() const;
};

struct AdaptationReport {
  RigidTransform bias;
  RigidTransform correction;
  std::size_t samples = 0;
  std::size_t failed = 0;
  /// Mean TCP error of the pseudo ground truth over the buffer.
  double pseudo_t = 0, pseudo_r_deg = 0;
  /// Mean held-out TCP error before and after the correction.
  double before_t = 0, before_r_deg = 0;
  double after_t = 0, after_r_deg = 0;
};

AdaptationReport run_bias_adaptation(const SamplerConfig& sampler, const SceneConfig& scene,
                                     const AdaptationConfig& cfg, std::uint64_t seed, int workers = 1);

}  // namespace cmvs
