#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cmvs/calibration.hpp"
#include "cmvs/dataset.hpp"
#include "cmvs/refinement.hpp"
#include "cmvs/servoing.hpp"

namespace cmvs {

/// Every tunable of a CLI run. Files are INI style: `[section]` headers and
/// `key = value` lines; see README for the key list.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string out = "out";

  GeometryParams geometry;

  // sensor camera, resampled to width x height for annotation
  double focal_length_mm = 12.465;
  double fx_full = 2100.0;
  int full_width = 2048, full_height = 1536;
  int width = 256, height = 192;
  double baseline = 63.3;
  double depth_min = 200.0, depth_max = 300.0;
  double lateral_jitter = 5.0;
  double bbox_alpha = 0.125;

  SamplerConfig sampler = SamplerConfig::defaults();
  std::size_t count = 100;  // generate

  SyntheticCalibration calibration;
  double huber_delta = 3.0;

  std::size_t refine_count = 50;
  double perturb_t = 3.0;
  double perturb_r_deg = 5.0;
  RefineOptions refine;
  bool refine_independent = false;
  /// Noise, depth and buffer sizes; the bias comes from the observer keys.
  AdaptationConfig adaptation;

  std::string observer = "noisy";  // truth | noisy | biased | refined
  double sigma_t = 0.83;
  double sigma_r_deg = 2.76;
  double bias_t = 2.0;
  double bias_r_deg = 3.0;

  bool hysteresis = true;
  ServoTasks tasks;

  ServoOptions servo;
  /// auto picks marker for the truth observer and model otherwise;
  /// custom keeps servo.tol_t / servo.tol_r.
  std::string thresholds = "auto";
  int trials = 30;

  static RunConfig defaults() { return {}; }
  /// Reads `path` over the current values. Throws IoError or InvalidConfig
  /// (naming the key) for unknown keys and unparsable values.
  void load(const std::filesystem::path& path);
  /// "section.key=value". Throws InvalidConfig.
  void set(const std::string& assignment);
  /// Same format as load() accepts, every key, fixed order.
  std::string to_ini() const;
  void validate() const;

  SceneConfig scene() const;
  /// Servo options with thresholds resolved against the observer mode.
  ServoOptions servo_options() const;
  RefineOptions refine_options() const;
  /// Bias drawn from the "bias" stream of the seed; the camera sits at the
  /// working depth in front of the point-task hinge. `correction` is only
  /// used by the refined mode.
  PoseObserver make_observer(const RigidTransform& correction = {}) const;
  AdaptationConfig adaptation_config() const;
};

}  // namespace cmvs
