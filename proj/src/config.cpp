#include "cmvs/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <variant>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "cmvs/error.hpp"

namespace cmvs {

namespace {

// Angles given in degrees in the file but stored in radians.
struct Degrees {
  double* rad;
};

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "seed is bound as a size_t");
using Target = std::variant<double*, int*, std::size_t*, std::string*, bool*, Degrees>;

struct Binding {
  std::string key;  // section.name
  Target target;
};

const char* const kJoint[7] = {"q1", "q2", "q3", "q4", "q5", "q6", "q7"};

std::vector<Binding> bindings(RunConfig& c) {
  std::vector<Binding> b = {
      {"run.seed", &c.seed},
      {"run.out", &c.out},

      {"geometry.element_length", &c.geometry.element_length},
      {"geometry.element_offset", &c.geometry.element_offset},
      {"geometry.elements_per_segment", &c.geometry.elements_per_segment},
      {"geometry.connector_length", &c.geometry.connector_length},
      {"geometry.hinge_length", &c.geometry.hinge_length},
      {"geometry.jaw_length", &c.geometry.jaw_length},
      {"geometry.hinge_radius", &c.geometry.hinge_radius},
      {"geometry.jaw_radius", &c.geometry.jaw_radius},

      {"camera.focal_length_mm", &c.focal_length_mm},
      {"camera.fx_full", &c.fx_full},
      {"camera.full_width", &c.full_width},
      {"camera.full_height", &c.full_height},
      {"camera.width", &c.width},
      {"camera.height", &c.height},
      {"camera.baseline", &c.baseline},
      {"camera.depth_min", &c.depth_min},
      {"camera.depth_max", &c.depth_max},
      {"camera.lateral_jitter", &c.lateral_jitter},
      {"camera.bbox_alpha", &c.bbox_alpha},
  };
  for (int i = 0; i < 7; ++i) {
    b.push_back({std::string("sampler.") + kJoint[i] + "_min", &c.sampler.ranges[i].min});
    b.push_back({std::string("sampler.") + kJoint[i] + "_max", &c.sampler.ranges[i].max});
  }
  const std::vector<Binding> rest = {
      {"sampler.min_opening_deg", Degrees{&c.sampler.min_opening}},
      {"sampler.max_rejections", &c.sampler.max_rejections},
      {"generate.count", &c.count},

      {"calibration.count", &c.calibration.count},
      {"calibration.sigma_t", &c.calibration.sigma_t},
      {"calibration.sigma_r_deg", &c.calibration.sigma_r_deg},
      {"calibration.outlier_fraction", &c.calibration.outlier_fraction},
      {"calibration.outlier_t", &c.calibration.outlier_t},
      {"calibration.outlier_r_deg", &c.calibration.outlier_r_deg},
      {"calibration.huber_delta", &c.huber_delta},

      {"refine.count", &c.refine_count},
      {"refine.perturb_t", &c.perturb_t},
      {"refine.perturb_r_deg", &c.perturb_r_deg},
      {"refine.n_opt", &c.refine.n_opt},
      {"refine.step", &c.refine.step},
      {"refine.armijo", &c.refine.armijo},
      {"refine.min_decrease", &c.refine.min_decrease},
      {"refine.max_step_px", &c.refine.max_step_px},
      {"refine.edge_width", &c.refine.edge_width},
      {"refine.w_mse", &c.refine.weights.mse},
      {"refine.w_dist", &c.refine.weights.dist},
      {"refine.w_scale", &c.refine.weights.scale},
      {"refine.w_kpt", &c.refine.weights.kpt},
      {"refine.beta", &c.refine.weights.beta},
      {"refine.gamma", &c.refine.weights.gamma},
      {"refine.independent", &c.refine_independent},

      {"adaptation.noise_t", &c.adaptation.noise_t},
      {"adaptation.noise_r_deg", &c.adaptation.noise_r_deg},
      {"adaptation.working_depth", &c.adaptation.working_depth},
      {"adaptation.buffer", &c.adaptation.buffer},
      {"adaptation.held_out", &c.adaptation.held_out},

      {"observer.mode", &c.observer},
      {"observer.sigma_t", &c.sigma_t},
      {"observer.sigma_r_deg", &c.sigma_r_deg},
      {"observer.bias_t", &c.bias_t},
      {"observer.bias_r_deg", &c.bias_r_deg},

      {"plant.hysteresis", &c.hysteresis},
      {"plant.backlash_rad", &c.tasks.hysteresis.backlash_rad},
      {"plant.backlash_mm", &c.tasks.hysteresis.backlash_mm},
      {"plant.gain_spread", &c.tasks.hysteresis.gain_spread},
      {"plant.jaw_factor", &c.tasks.hysteresis.jaw_factor},
      {"plant.square_backlash_rad", &c.tasks.square_hysteresis.backlash_rad},
      {"plant.square_backlash_mm", &c.tasks.square_hysteresis.backlash_mm},
      {"plant.square_gain_spread", &c.tasks.square_hysteresis.gain_spread},
      {"plant.square_jaw_factor", &c.tasks.square_hysteresis.jaw_factor},

      {"servo.gain", &c.servo.gain},
      {"servo.thresholds", &c.thresholds},
      {"servo.tol_t", &c.servo.tol_t},
      {"servo.tol_r", &c.servo.tol_r},
      {"servo.max_iters", &c.servo.max_iters},
      {"servo.control_interval", &c.servo.control_interval},
      {"servo.damping", &c.servo.damping},
      {"servo.opening_deg", Degrees{&c.servo.opening}},
      {"servo.trials", &c.trials},
      {"servo.start_jitter_mm", &c.tasks.start_jitter_mm},
      {"servo.start_jitter_rad", &c.tasks.start_jitter_rad},
      {"servo.square_side", &c.tasks.square_side},
      {"servo.square_count", &c.tasks.square_count},
  };
  b.insert(b.end(), rest.begin(), rest.end());
  return b;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw Error(ErrorCode::InvalidConfig, key + ": cannot parse '" + value + "'");
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) bad_value(key, value);
  return out;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void assign(RunConfig& c, const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  for (auto& b : bindings(c)) {
    if (b.key != key) continue;
    std::visit(
        [&](auto target) {
          using T = decltype(target);
          if constexpr (std::is_same_v<T, double*>) *target = parse_number<double>(key, value);
          else if constexpr (std::is_same_v<T, int*>) *target = parse_number<int>(key, value);
          else if constexpr (std::is_same_v<T, std::size_t*>) *target = parse_number<std::size_t>(key, value);
          else if constexpr (std::is_same_v<T, std::string*>) *target = value;
          else if constexpr (std::is_same_v<T, Degrees>) *target.rad = deg2rad(parse_number<double>(key, value));
          else {
            if (value == "true" || value == "1") *target = true;
            else if (value == "false" || value == "0") *target = false;
            else bad_value(key, value);
          }
        },
        b.target);
    return;
  }
  throw Error(ErrorCode::InvalidConfig, "unknown key '" + key + "'");
}

}  // namespace

void RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open config " + path.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error(ErrorCode::InvalidConfig, path.string() + ": " + e.message() + " at line " + std::to_string(e.line()));
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw Error(ErrorCode::InvalidConfig, "key '" + section + "' outside a section");
    for (const auto& [name, value] : body) assign(*this, section + "." + name, value.data());
  }
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw Error(ErrorCode::InvalidConfig, "expected section.key=value, got '" + assignment + "'");
  assign(*this, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string RunConfig::to_ini() const {
  RunConfig copy = *this;
  std::ostringstream os;
  std::string section;
  for (const auto& b : bindings(copy)) {
    const auto dot = b.key.find('.');
    const std::string sec = b.key.substr(0, dot);
    if (sec != section) {
      os << (section.empty() ? "" : "\n") << "[" << sec << "]\n";
      section = sec;
    }
    os << b.key.substr(dot + 1) << " = ";
    std::visit(
        [&](auto target) {
          using T = decltype(target);
          if constexpr (std::is_same_v<T, double*>) os << format_double(*target);
          else if constexpr (std::is_same_v<T, Degrees>) os << format_double(rad2deg(*target.rad));
          else if constexpr (std::is_same_v<T, bool*>) os << (*target ? "true" : "false");
          else os << *target;
        },
        b.target);
    os << "\n";
  }
  return os.str();
}

void RunConfig::validate() const {
  geometry.validate();
  scene().validate();
  sampler.validate();
  refine_options().validate();
  adaptation.validate();
  servo_options().validate();
  if (observer != "truth" && observer != "noisy" && observer != "biased" && observer != "refined")
    throw Error(ErrorCode::InvalidConfig, "observer.mode must be truth, noisy, biased or refined");
  if (thresholds != "auto" && thresholds != "marker" && thresholds != "model")
    if (thresholds != "custom")
      throw Error(ErrorCode::InvalidConfig, "servo.thresholds must be auto, marker, model or custom");
  if (!(sigma_t >= 0.0) || !(sigma_r_deg >= 0.0))
    throw Error(ErrorCode::InvalidConfig, "observer.sigma_t and observer.sigma_r_deg must be non-negative");
  if (!(bias_t >= 0.0) || !(bias_r_deg >= 0.0))
    throw Error(ErrorCode::InvalidConfig, "observer.bias_t and observer.bias_r_deg must be non-negative");
  if (trials < 0) throw Error(ErrorCode::InvalidConfig, "servo.trials must be non-negative");
  if (calibration.count < 3) throw Error(ErrorCode::InvalidConfig, "calibration.count must be at least 3");
  if (!(calibration.outlier_fraction >= 0.0 && calibration.outlier_fraction <= 1.0))
    throw Error(ErrorCode::InvalidConfig, "calibration.outlier_fraction must be in [0, 1]");
}

SceneConfig RunConfig::scene() const {
  SceneConfig s;
  s.geometry = geometry;
  const CameraIntrinsics full =
      CameraIntrinsics::from_focal_length(focal_length_mm, focal_length_mm / fx_full, full_width, full_height);
  s.rig = StereoRig::rectified(full, baseline).scaled(width, height);
  s.depth_min = depth_min;
  s.depth_max = depth_max;
  s.lateral_jitter = lateral_jitter;
  s.bbox_alpha = bbox_alpha;
  s.layout = KeypointLayout::standard(geometry);
  return s;
}

ServoOptions RunConfig::servo_options() const {
  ServoOptions o = servo;
  if (thresholds == "custom") return o;
  const bool marker = thresholds == "marker" || (thresholds == "auto" && observer == "truth");
  const ServoOptions preset = marker ? ServoOptions::marker() : ServoOptions::model();
  o.tol_t = preset.tol_t;
  o.tol_r = preset.tol_r;
  return o;
}

RefineOptions RunConfig::refine_options() const {
  RefineOptions o = refine;
  o.mode = refine_independent ? PoseMode::Independent : PoseMode::Rigid;
  return o;
}

PoseObserver RunConfig::make_observer(const RigidTransform& correction) const {
  PoseObserver o;
  std::mt19937_64 rng = named_rng(seed, "bias", 0);
  const RigidTransform bias = working_point_bias(bias_t, deg2rad(bias_r_deg), adaptation.working_depth, rng);
  if (observer == "noisy") o = PoseObserver::noisy(sigma_t, sigma_r_deg);
  else if (observer == "biased") o = PoseObserver::biased(bias, sigma_t, sigma_r_deg);
  else if (observer == "refined") o = PoseObserver::refined(bias, correction, sigma_t, sigma_r_deg);
  const Vec3 hinge = forward_kinematics(tasks.point_target, geometry).hinge.translation;
  o.cam_from_base = place_camera(scene(), hinge, adaptation.working_depth);
  return o;
}

AdaptationConfig RunConfig::adaptation_config() const {
  AdaptationConfig a = adaptation;
  a.bias_t = bias_t;
  a.bias_r_deg = bias_r_deg;
  a.refine = refine_options();
  return a;
}

}  // namespace cmvs
