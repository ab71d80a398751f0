#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cmvs/dataset.hpp"
#include "cmvs/error.hpp"
#include "test_support.hpp"

using namespace cmvs;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cmvs_dataset_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Every regular file under `a` exists under `b` with identical bytes, and vice versa.
bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t na = 0, nb = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++na;
    const fs::path other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) return false;
  }
  for (const auto& e : fs::recursive_directory_iterator(b)) nb += e.is_regular_file();
  return na == nb;
}

}  // namespace

TEST_CASE("sampler determinism and degenerate ranges") {
  const SamplerConfig cfg = SamplerConfig::defaults();
  std::mt19937_64 a(42), b(42);
  CHECK(sample_joint_config(cfg, a) == sample_joint_config(cfg, b));

  SamplerConfig fixed = cfg;
  fixed.ranges = {Range{3, 3}, Range{0.1, 0.1}, Range{0.2, 0.2}, Range{-0.3, -0.3},
                  Range{0.4, 0.4}, Range{0.5, 0.5}, Range{-0.5, -0.5}};
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10; ++i) CHECK(sample_joint_config(fixed, rng) == JointConfig{3, 0.1, 0.2, -0.3, 0.4, 0.5, -0.5});

  SamplerConfig impossible = cfg;
  impossible.min_opening = deg2rad(150.0);
  try {
    sample_joint_config(impossible, rng);
    FAIL("expected SamplingExhausted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SamplingExhausted);
  }
}

TEST_CASE("sampler covers its ranges without violating the jaw constraint") {
  const SamplerConfig cfg = SamplerConfig::defaults();
  std::mt19937_64 rng(7);
  std::array<double, 7> lo, hi;
  lo.fill(1e9);
  hi.fill(-1e9);
  int violations = 0;
  for (int i = 0; i < 10000; ++i) {
    const JointConfig q = sample_joint_config(cfg, rng);
    violations += q.q6 - q.q7 < cfg.min_opening;
    const auto a = q.as_array();
    for (int j = 0; j < 7; ++j) {
      lo[j] = std::min(lo[j], a[j]);
      hi[j] = std::max(hi[j], a[j]);
    }
  }
  CHECK(violations == 0);
  // The opening constraint trims one end of each jaw range, where the
  // accepted density falls off linearly; those two ends get a wider margin.
  std::array<Range, 7> reach = cfg.ranges;
  reach[5].min = cfg.ranges[6].min + cfg.min_opening;
  reach[6].max = cfg.ranges[5].max - cfg.min_opening;
  for (int j = 0; j < 7; ++j) {
    const double width = cfg.ranges[j].max - cfg.ranges[j].min;
    CHECK(lo[j] - reach[j].min <= (j == 5 ? 0.03 : 0.01) * width);
    CHECK(reach[j].max - hi[j] <= (j == 6 ? 0.03 : 0.01) * width);
    CHECK(lo[j] >= cfg.ranges[j].min);
    CHECK(hi[j] <= cfg.ranges[j].max);
  }
}

TEST_CASE("sampler validation names the field") {
  SamplerConfig cfg = SamplerConfig::defaults();
  cfg.ranges[2] = {-2.0, 0.5};
  try {
    cfg.validate();
    FAIL("expected InvalidConfig");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidConfig);
    CHECK(std::string(e.what()).find("sampler.q3") != std::string::npos);
  }
}

TEST_CASE("zero configuration record") {
  const SceneConfig scene = SceneConfig::defaults();
  JointConfig q;
  const AnnotationRecord r = generate_record(0, q, scene);
  CHECK(r.tcp.translation.z() >= 200.0);
  CHECK(r.tcp.translation.z() <= 300.0);
  CHECK(r.keypoints_left.size() == 65);
  CHECK(r.mask_left.width == 256);
  CHECK(r.mask_left.height == 192);
  CHECK(r.mask_left.foreground_count() > 0);
  CHECK(r.mask_right.foreground_count() > 0);
}

TEST_CASE("generated records satisfy their invariants") {
  const SceneConfig scene = SceneConfig::defaults();
  const auto records = generate_dataset(SamplerConfig::defaults(), scene, 60, 11);
  for (const auto& r : records) {
    const RigidTransform tcp = tcp_from_jaws(r.jaw1, r.jaw2, scene.geometry.jaw_length);
    CHECK((tcp.translation - r.tcp.translation).norm() < 1e-9);
    CHECK(cmvs::testing::pose_angle(tcp, r.tcp) < 1e-9);
    CHECK(r.hinge.translation.z() >= 200.0);
    CHECK(r.hinge.translation.z() <= 300.0);

    const Vec2 hinge_px = project_point(scene.rig.left, RigidTransform::identity(), r.hinge.translation);
    if (!r.bbox_left.clamped) {
      const Vec2 centre(0.5 * (r.bbox_left.u_min + r.bbox_left.u_max), 0.5 * (r.bbox_left.v_min + r.bbox_left.v_max));
      CHECK((centre - hinge_px).norm() < 0.5);
      CHECK(r.bbox_left.u_max - r.bbox_left.u_min == doctest::Approx(2 * scene.bbox_alpha * r.hinge.translation.z()));
    }
    REQUIRE(r.keypoints_left.size() == 65);
    REQUIRE(r.keypoints_right.size() == 65);
    for (const auto& k : r.keypoints_left) {
      if (k.rho) CHECK(scene.rig.left.inside(Vec2(k.x, k.y)));
    }
  }
}

TEST_CASE("dataset round trip") {
  const SceneConfig scene = SceneConfig::defaults();

  SUBCASE("empty") {
    const fs::path dir = scratch("empty");
    write_dataset({}, dir);
    CHECK(read_dataset(dir).empty());
    fs::remove_all(dir);
  }

  SUBCASE("100 records bit-exact") {
    const auto records = generate_dataset(SamplerConfig::defaults(), scene, 100, 5);
    const fs::path dir = scratch("hundred");
    write_dataset(records, dir);
    const auto back = read_dataset(dir);
    REQUIRE(back.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) CHECK(back[i] == records[i]);
    fs::remove_all(dir);
  }

  SUBCASE("schema version mismatch") {
    const fs::path dir = scratch("schema");
    write_dataset(generate_dataset(SamplerConfig::defaults(), scene, 2, 5), dir);
    std::string text = slurp(dir / "index.jsonl");
    const auto pos = text.find("\"schema_version\":1");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 18, "\"schema_version\":2");
    std::ofstream(dir / "index.jsonl", std::ios::binary) << text;
    try {
      read_dataset(dir);
      FAIL("expected SchemaVersionMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::SchemaVersionMismatch);
    }
    fs::remove_all(dir);
  }

  SUBCASE("missing directory") {
    try {
      read_dataset(scratch("missing"));
      FAIL("expected IoError");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::IoError);
    }
  }
}

TEST_CASE("generation is byte-reproducible across runs and worker counts") {
  const SceneConfig scene = SceneConfig::defaults();
  const fs::path a = scratch("repro_a"), b = scratch("repro_b"), c = scratch("repro_c");
  write_dataset(generate_dataset(SamplerConfig::defaults(), scene, 100, 99, 1), a);
  write_dataset(generate_dataset(SamplerConfig::defaults(), scene, 100, 99, 1), b);
  write_dataset(generate_dataset(SamplerConfig::defaults(), scene, 100, 99, 3), c);
  CHECK(same_tree(a, b));
  CHECK(same_tree(a, c));
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(c);
}

TEST_CASE("random records survive serialization") {
  // property: arbitrary valid configs and placements round-trip exactly
  const SceneConfig scene = SceneConfig::defaults();
  std::mt19937_64 rng(123);
  std::vector<AnnotationRecord> records;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const JointConfig q = cmvs::testing::random_joint_config(rng);
    const Vec3 hinge = forward_kinematics(q, scene.geometry).hinge.translation;
    records.push_back(generate_record(1000 + i, q, scene, sample_camera_placement(scene, hinge, rng)));
  }
  const fs::path dir = scratch("property");
  write_dataset(records, dir);
  CHECK(read_dataset(dir) == records);
  fs::remove_all(dir);
}

TEST_CASE("dataset statistics") {
  const SamplerConfig sampler = SamplerConfig::defaults();
  const auto records = generate_dataset(sampler, SceneConfig::defaults(), 40, 3);
  const DatasetStats s = dataset_stats(records, sampler);
  CHECK(s.count == 40);
  for (const auto& h : s.joint_histograms) {
    std::size_t total = 0;
    for (auto n : h) total += n;
    CHECK(total == 40);
  }
  CHECK(s.visibility_left > 0.0);
  CHECK(s.visibility_left <= 1.0);
}
