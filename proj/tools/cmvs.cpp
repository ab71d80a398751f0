#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmvs/config.hpp"
#include "cmvs/error.hpp"
#include "cmvs/parallel.hpp"

using namespace cmvs;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  int workers = 1;
  std::vector<std::string> sets;
};

json pose_json(const RigidTransform& t) {
  const auto& q = t.rotation;
  return {{"q", {q.w(), q.x(), q.y(), q.z()}}, {"t", {t.translation.x(), t.translation.y(), t.translation.z()}}};
}

json error_json(const RigidTransform& est, const RigidTransform& truth) {
  return {{"t_mm", (est.translation - truth.translation).norm()},
          {"r_deg", rotation_error_deg(est.rotation, truth.rotation)}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string num(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

// Loads the file, applies flags and --set overrides, validates, creates the
// output directory and echoes the resolved configuration into it.
RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) cfg.load(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  if (c.out) cfg.out = *c.out;
  for (const auto& s : c.sets) cfg.set(s);
  cfg.validate();
  std::error_code ec;
  fs::create_directories(cfg.out, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + cfg.out + ": " + ec.message());
  write_text(fs::path(cfg.out) / "config.ini", cfg.to_ini());
  return cfg;
}

int cmd_generate(const RunConfig& cfg, int workers) {
  const SceneConfig scene = cfg.scene();
  const auto records = generate_dataset(cfg.sampler, scene, cfg.count, cfg.seed, workers);
  const fs::path out(cfg.out);
  write_dataset(records, out / "dataset");
  const DatasetStats s = dataset_stats(records, cfg.sampler);
  json hist = json::array();
  for (const auto& h : s.joint_histograms) hist.push_back(h);
  write_json(out / "summary.json", {{"command", "generate"},
                                    {"count", s.count},
                                    {"joint_histograms", hist},
                                    {"visibility_left", s.visibility_left},
                                    {"visibility_right", s.visibility_right},
                                    {"bbox_clamped", s.bbox_clamped}});
  std::printf("generated %zu records in %s\n", s.count, (out / "dataset").c_str());
  return 0;
}

int cmd_calibrate(const RunConfig& cfg) {
  const GeometryParams& geo = cfg.geometry;
  std::mt19937_64 x_rng = named_rng(cfg.seed, "extrinsic", 0);
  const Vec3 hinge = forward_kinematics(JointConfig{}, geo).hinge.translation;
  const RigidTransform x_true = random_offset(5.0, deg2rad(2.0), x_rng) * place_camera(cfg.scene(), hinge, 250.0);

  std::mt19937_64 rng = named_rng(cfg.seed, "calibration", 0);
  const auto obs = synthesize_calibration(x_true, cfg.calibration, geo, rng);
  const auto candidates = extrinsic_candidates(obs);
  const RigidTransform x0 = initial_extrinsic(candidates);
  RobustOptions robust;
  robust.huber_delta = cfg.huber_delta;
  RobustOptions ls = RobustOptions::least_squares();
  ls.weights = robust.weights;
  const RefineResult r = robust_refine(candidates, x0, robust);
  const RefineResult p = robust_refine(candidates, x0, ls);
  const Spread spread = candidate_spread(candidates, x_true);

  const fs::path out(cfg.out);
  std::ostringstream csv;
  csv << "index,residual_norm,weight,ls_residual_norm\n";
  for (std::size_t i = 0; i < candidates.size(); ++i)
    csv << i << "," << num(r.residual_norms[i]) << "," << num(r.weights[i]) << "," << num(p.residual_norms[i]) << "\n";
  write_text(out / "residuals.csv", csv.str());

  auto result = [&](const RefineResult& rr) {
    json j = error_json(rr.estimate, x_true);
    j["estimate"] = pose_json(rr.estimate);
    j["iterations"] = rr.iterations;
    j["converged"] = rr.converged;
    j["objective"] = rr.objective_trace.back();
    return j;
  };
  write_json(out / "summary.json", {{"command", "calibrate"},
                                    {"count", obs.size()},
                                    {"x_true", pose_json(x_true)},
                                    {"candidate_spread", {{"t_mm", spread.translation}, {"r_deg", spread.rotation_deg}}},
                                    {"initial", error_json(x0, x_true)},
                                    {"robust", result(r)},
                                    {"least_squares", result(p)}});
  const json e = error_json(r.estimate, x_true), l = error_json(p.estimate, x_true);
  std::printf("%-14s %10s %10s\n", "estimator", "t_mm", "r_deg");
  std::printf("%-14s %10.4f %10.4f\n", "robust", e["t_mm"].get<double>(), e["r_deg"].get<double>());
  std::printf("%-14s %10.4f %10.4f\n", "least squares", l["t_mm"].get<double>(), l["r_deg"].get<double>());
  return 0;
}

int cmd_refine(const RunConfig& cfg, int workers, bool adapt) {
  const SceneConfig scene = cfg.scene();
  const RefineScene rs = RefineScene::from(scene);
  const RefineOptions opts = cfg.refine_options();
  const auto records = generate_dataset(cfg.sampler, scene, cfg.refine_count, cfg.seed, workers);

  struct Row {
    double init_t = 0, init_r = 0, final_t = 0, final_r = 0, loss0 = 0, loss = 0;
    int iterations = 0;
    bool early = false;
    std::string failure;
  };
  std::vector<Row> rows(records.size());
  parallel_for(records.size(), workers, [&](std::size_t i) {
    const auto& r = records[i];
    std::mt19937_64 rng = named_rng(cfg.seed, "perturb", i);
    const ComponentPoses truth{r.jaw1, r.jaw2, r.hinge, r.tcp};
    const ComponentPoses init =
        offset_at_tcp(truth, random_offset(cfg.perturb_t, deg2rad(cfg.perturb_r_deg), rng));
    Row& row = rows[i];
    row.init_t = (init.tcp.translation - r.tcp.translation).norm();
    row.init_r = rotation_error_deg(init.tcp.rotation, r.tcp.rotation);
    try {
      const PoseRefinement pr = refine_pose_gd(init, observation_from_record(r), rs, opts);
      row.final_t = (pr.poses.tcp.translation - r.tcp.translation).norm();
      row.final_r = rotation_error_deg(pr.poses.tcp.rotation, r.tcp.rotation);
      row.loss0 = pr.loss_trace.front();
      row.loss = pr.loss_trace.back();
      row.iterations = pr.iterations;
      row.early = pr.early_stop;
    } catch (const Error& e) {
      row.failure = std::string(to_string(e.code()));
    }
  });

  std::ostringstream csv;
  csv << "id,init_t_mm,init_r_deg,final_t_mm,final_r_deg,loss_init,loss_final,iterations,early_stop,failure\n";
  std::size_t recovered = 0;
  double mt = 0, mr = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Row& w = rows[i];
    csv << records[i].id << "," << num(w.init_t) << "," << num(w.init_r) << "," << num(w.final_t) << ","
        << num(w.final_r) << "," << num(w.loss0) << "," << num(w.loss) << "," << w.iterations << ","
        << (w.early ? 1 : 0) << "," << w.failure << "\n";
    recovered += w.failure.empty() && w.final_t < 0.5 && w.final_r < 1.0;
    mt += w.final_t;
    mr += w.final_r;
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  const fs::path out(cfg.out);
  write_text(out / "refine.csv", csv.str());
  json summary = {{"command", "refine"},
                  {"count", rows.size()},
                  {"recovered", recovered},
                  {"recovered_fraction", rows.empty() ? 0.0 : recovered / n},
                  {"mean_final_t_mm", mt / n},
                  {"mean_final_r_deg", mr / n}};
  std::printf("recovered %zu / %zu scenes to 0.5 mm / 1 deg\n", recovered, rows.size());

  if (adapt) {
    const AdaptationReport a = run_bias_adaptation(cfg.sampler, scene, cfg.adaptation_config(), cfg.seed, workers);
    summary["adaptation"] = {{"bias", pose_json(a.bias)},
                             {"correction", pose_json(a.correction)},
                             {"samples", a.samples},
                             {"failed", a.failed},
                             {"pseudo_t_mm", a.pseudo_t},
                             {"pseudo_r_deg", a.pseudo_r_deg},
                             {"before_t_mm", a.before_t},
                             {"before_r_deg", a.before_r_deg},
                             {"after_t_mm", a.after_t},
                             {"after_r_deg", a.after_r_deg}};
    std::printf("bias correction: %.3f mm / %.3f deg -> %.3f mm / %.3f deg\n", a.before_t, a.before_r_deg, a.after_t,
                a.after_r_deg);
  }
  write_json(out / "summary.json", summary);
  return 0;
}

std::string trace_csv(const std::vector<ServoResult>& runs, const char* index_name) {
  std::ostringstream csv;
  csv << index_name << ",iteration,model_t_mm,model_r_deg,truth_t_mm,truth_r_deg\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    for (std::size_t k = 0; k < runs[i].trace.size(); ++k) {
      const auto& s = runs[i].trace[k];
      csv << i << "," << k << "," << num(s.model_t) << "," << num(s.model_r_deg) << "," << num(s.truth_t) << ","
          << num(s.truth_r_deg) << "\n";
    }
  }
  return csv.str();
}

json trajectory_json(const TrajectoryResult& r) {
  std::size_t converged = 0;
  for (const auto& t : r.targets) converged += t.converged;
  return {{"targets", r.targets.size()},  {"converged", converged},       {"mean_t_mm", r.mean_t},
          {"std_t_mm", r.std_t},          {"mean_r_deg", r.mean_r_deg}, {"std_r_deg", r.std_r_deg}};
}

int cmd_servo(const RunConfig& cfg, int workers, const std::string& task) {
  const GeometryParams& geo = cfg.geometry;
  const ServoOptions opts = cfg.servo_options();
  const fs::path out(cfg.out);
  json summary = {{"command", "servo"}, {"task", task}, {"observer", cfg.observer}};

  RigidTransform correction;
  if (cfg.observer == "refined") {
    const AdaptationReport a =
        run_bias_adaptation(cfg.sampler, cfg.scene(), cfg.adaptation_config(), cfg.seed, workers);
    correction = a.correction;
    summary["correction"] = pose_json(correction);
  }
  const PoseObserver observer = cfg.make_observer(correction);

  bool ok = true;
  if (task == "point") {
    const TrialSummary s =
        point_reaching_trials(cfg.tasks, observer, cfg.hysteresis, opts, geo, cfg.trials, cfg.seed, workers);
    write_text(out / "traces.csv", trace_csv(s.runs, "trial"));
    std::vector<int> iters;
    for (const auto& r : s.runs) iters.push_back(r.iterations);
    summary["trials"] = cfg.trials;
    summary["converged_fraction"] = s.converged_fraction;
    summary["mean_t_mm"] = s.mean_t;
    summary["std_t_mm"] = s.std_t;
    summary["mean_r_deg"] = s.mean_r_deg;
    summary["std_r_deg"] = s.std_r_deg;
    summary["iterations"] = iters;
    ok = s.converged_fraction == 1.0;
    std::printf("point: %d trials, converged %.0f%%, final %.3f +- %.3f mm, %.3f +- %.3f deg\n", cfg.trials,
                100 * s.converged_fraction, s.mean_t, s.std_t, s.mean_r_deg, s.std_r_deg);
  } else if (task == "square" || task == "open_loop") {
    const TrajectoryMode mode = task == "square" ? TrajectoryMode::ClosedLoop : TrajectoryMode::OpenLoop;
    const TrajectoryResult r = square_task(cfg.tasks, mode, observer, cfg.hysteresis, opts, geo, cfg.seed);
    write_text(out / "traces.csv", trace_csv(r.targets, "target"));
    summary["trajectory"] = trajectory_json(r);
    if (mode == TrajectoryMode::ClosedLoop) {
      for (const auto& t : r.targets) ok = ok && t.converged;
    }
    std::printf("%s: mean %.3f +- %.3f mm, %.3f +- %.3f deg\n", task.c_str(), r.mean_t, r.std_t, r.mean_r_deg,
                r.std_r_deg);
  } else if (task == "compare") {
    // open loop, marker-grade feedback and the configured observer on one square
    const TrajectoryResult open =
        square_task(cfg.tasks, TrajectoryMode::OpenLoop, observer, cfg.hysteresis, opts, geo, cfg.seed);
    const TrajectoryResult marker = square_task(cfg.tasks, TrajectoryMode::ClosedLoop, PoseObserver::truth(),
                                                cfg.hysteresis, ServoOptions::marker(), geo, cfg.seed);
    const TrajectoryResult model =
        square_task(cfg.tasks, TrajectoryMode::ClosedLoop, observer, cfg.hysteresis, opts, geo, cfg.seed);
    std::ostringstream csv;
    csv << "mode,mean_t_mm,std_t_mm,mean_r_deg,std_r_deg\n";
    std::printf("%-10s %18s %18s\n", "mode", "t_mm", "r_deg");
    for (const auto& [name, r] : {std::pair<const char*, const TrajectoryResult*>{"open_loop", &open},
                                  {"marker", &marker},
                                  {"observer", &model}}) {
      csv << name << "," << num(r->mean_t) << "," << num(r->std_t) << "," << num(r->mean_r_deg) << ","
          << num(r->std_r_deg) << "\n";
      summary[name] = trajectory_json(*r);
      std::printf("%-10s %8.3f +- %6.3f %8.3f +- %6.3f\n", name, r->mean_t, r->std_t, r->mean_r_deg, r->std_r_deg);
    }
    write_text(out / "comparison.csv", csv.str());
  } else {
    throw Error(ErrorCode::InvalidConfig, "unknown servo task '" + task + "'");
  }
  summary["all_converged"] = ok;
  write_json(out / "summary.json", summary);
  return ok ? 0 : 1;
}

// Collects every summary.json below `in` into one table.
int cmd_report(const RunConfig& cfg, const std::string& in) {
  if (!fs::is_directory(in)) throw Error(ErrorCode::IoError, "no such directory " + in);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(in)) {
    if (e.is_regular_file() && e.path().filename() == "summary.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::ostringstream md;
  md << "| run | command | key results |\n|---|---|---|\n";
  json all = json::object();
  for (const auto& f : files) {
    std::ifstream is(f);
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw Error(ErrorCode::IoError, f.string() + ": " + e.what());
    }
    const std::string run = fs::relative(f.parent_path(), in).generic_string();
    std::string key;
    for (const char* k : {"count", "recovered_fraction", "converged_fraction", "mean_t_mm", "mean_r_deg"}) {
      if (j.contains(k)) key += std::string(k) + "=" + j[k].dump() + " ";
    }
    if (j.contains("robust")) key += "robust_t_mm=" + j["robust"]["t_mm"].dump() + " ";
    if (j.contains("trajectory")) key += "traj_mean_t_mm=" + j["trajectory"]["mean_t_mm"].dump() + " ";
    md << "| " << run << " | " << j.value("command", "?") << " | " << key << "|\n";
    all[run] = j;
  }
  const fs::path out(cfg.out);
  write_text(out / "report.md", md.str());
  write_json(out / "report.json", all);
  std::cout << md.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continuum manipulator kinematics, calibration, refinement and servoing"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "INI configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "master seed (overrides run.seed)");
    sub->add_option("--out", common.out, "output directory (overrides run.out)");
    sub->add_option("--workers", common.workers, "worker threads; results do not depend on it")
        ->check(CLI::PositiveNumber);
    sub->add_option("--set", common.sets, "override, section.key=value (repeatable)");
  };

  std::optional<std::size_t> count;
  auto* gen = app.add_subcommand("generate", "render a synthetic annotation dataset");
  add_common(gen);
  gen->add_option("--count", count, "number of records");

  std::optional<double> sigma_t, sigma_r, outliers;
  auto* cal = app.add_subcommand("calibrate", "synthetic hand-eye calibration, robust vs least squares");
  add_common(cal);
  cal->add_option("--count", count, "number of observations");
  cal->add_option("--sigma-t", sigma_t, "candidate translation noise, 3-D RMS mm");
  cal->add_option("--sigma-r", sigma_r, "candidate rotation noise, 3-D RMS deg");
  cal->add_option("--outliers", outliers, "fraction of gross outliers");

  bool adapt = false;
  std::optional<double> perturb_t, perturb_r;
  auto* ref = app.add_subcommand("refine", "render-and-compare pose refinement from perturbed poses");
  add_common(ref);
  ref->add_option("--count", count, "number of scenes");
  ref->add_option("--perturb-t", perturb_t, "initial TCP offset, mm");
  ref->add_option("--perturb-r", perturb_r, "initial TCP rotation offset, deg");
  ref->add_flag("--adapt", adapt, "also fit and evaluate the observer bias correction");

  std::string task = "point";
  std::optional<int> trials;
  std::optional<std::string> observer;
  auto* servo = app.add_subcommand("servo", "position-based visual servoing experiments");
  add_common(servo);
  servo->add_option("--task", task, "point | square | open_loop | compare")
      ->check(CLI::IsMember({"point", "square", "open_loop", "compare"}));
  servo->add_option("--trials", trials, "point-reaching trials");
  servo->add_option("--observer", observer, "truth | noisy | biased | refined");

  std::string in;
  auto* rep = app.add_subcommand("report", "tabulate every summary.json under a directory");
  add_common(rep);
  rep->add_option("--in", in, "directory holding earlier runs")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (count) {
      if (*gen) common.sets.push_back("generate.count=" + std::to_string(*count));
      if (*cal) common.sets.push_back("calibration.count=" + std::to_string(*count));
      if (*ref) common.sets.push_back("refine.count=" + std::to_string(*count));
    }
    if (sigma_t) common.sets.push_back("calibration.sigma_t=" + num(*sigma_t));
    if (sigma_r) common.sets.push_back("calibration.sigma_r_deg=" + num(*sigma_r));
    if (outliers) common.sets.push_back("calibration.outlier_fraction=" + num(*outliers));
    if (perturb_t) common.sets.push_back("refine.perturb_t=" + num(*perturb_t));
    if (perturb_r) common.sets.push_back("refine.perturb_r_deg=" + num(*perturb_r));
    if (trials) common.sets.push_back("servo.trials=" + std::to_string(*trials));
    if (observer) common.sets.push_back("observer.mode=" + *observer);

    const RunConfig cfg = resolve(common);
    if (*gen) return cmd_generate(cfg, common.workers);
    if (*cal) return cmd_calibrate(cfg);
    if (*ref) return cmd_refine(cfg, common.workers, adapt);
    if (*servo) return cmd_servo(cfg, common.workers, task);
    return cmd_report(cfg, in);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
