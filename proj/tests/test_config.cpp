#include "liectl/bundled.hpp"
#include "liectl/config.hpp"

#include <gtest/gtest.h>

#include <string>

using namespace liectl;

namespace {

const std::string kConfigDir = LIECTL_CONFIG_DIR;

const char* kMinimal = R"(name: tiny
algebra:
  dim: 3
  brackets:
    - [1, 2, 3, 1.0]
lattice: [3]
drift_diagonal: [1, -1, 0]
controls:
  - [1, 1, 0]
control_box:
  - [-1, 1]
)";

int error_line(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.line();
  }
  return -1;
}

}  // namespace

TEST(Config, MinimalSystemUsesOneBasedIndices) {
  const auto cfg = parse_config(kMinimal);
  ASSERT_TRUE(cfg.system.has_value());
  const auto& g = cfg.system->group();
  EXPECT_EQ(g.dim(), 3U);
  EXPECT_TRUE(g.is_lattice(2));
  EXPECT_DOUBLE_EQ(g.algebra().constant(2, 0, 1), 1.0);
  EXPECT_DOUBLE_EQ(g.algebra().constant(2, 1, 0), -1.0);
  EXPECT_EQ(cfg.initial, Vector::Zero(3));
  EXPECT_TRUE(cfg.law.empty());
  EXPECT_EQ(cfg.perset.kind, FKind::Identity);
  EXPECT_FALSE(cfg.semidirect.has_value());
}

TEST(Config, BundledFilesMatchCodeSystems) {
  const auto r2 = load_config(kConfigDir + "/r2.yaml");
  const auto ref = bundled::r2();
  EXPECT_EQ(r2.system->drift(), ref.drift());
  EXPECT_EQ(r2.system->controls()[0], ref.controls()[0]);
  EXPECT_EQ(r2.reach.window.size(), 2U);
  EXPECT_EQ(r2.reach.budget, 20000U);

  const auto hq = load_config(kConfigDir + "/heisenberg_quotient.yaml");
  const auto href = bundled::heisenberg(true);
  EXPECT_EQ(hq.system->drift(), href.drift());
  EXPECT_EQ(hq.system->group().lattice(), href.group().lattice());
  EXPECT_EQ(hq.perset.kind, FKind::CentralSubgroup);
  EXPECT_EQ(hq.system->group().algebra().labels()[2], "z");
  EXPECT_EQ(hq.schedule.size(), 5U);

  const auto h = load_config(kConfigDir + "/heisenberg.yaml");
  EXPECT_FALSE(h.system->group().has_lattice());
  EXPECT_EQ(h.reach.window.size(), 3U);
}

TEST(Config, EveryBundledFileLoads) {
  for (const char* f : {"r2", "heisenberg_quotient", "heisenberg", "line_integrator", "filiform4", "torus_plane"}) {
    EXPECT_NO_THROW(load_config(kConfigDir + "/" + f + ".yaml")) << f;
  }
  const auto t = load_config(kConfigDir + "/torus_plane.yaml");
  ASSERT_TRUE(t.semidirect.has_value());
  EXPECT_EQ(t.semidirect->torus_dim(), 1U);
}

TEST(Config, HashTracksContent) {
  const auto a = parse_config(kMinimal);
  const auto b = parse_config(std::string(kMinimal) + "initial: [0, 0, 0.5]\n");
  EXPECT_EQ(a.hash.size(), 16U);
  EXPECT_NE(a.hash, b.hash);
  EXPECT_EQ(a.hash, parse_config(kMinimal).hash);
  EXPECT_EQ(content_hash(""), "cbf29ce484222325");
}

TEST(Config, LawAndReachSections) {
  const auto cfg = parse_config(std::string(kMinimal) + R"(law:
  - {duration: 0.5, value: [1]}
  - {duration: 1.5, value: [-0.25]}
reach:
  t_max: 4
  budget: 123
  seed: 99
  dwell: [0.1, 0.2]
  window: [[-2, 2], [-1, 1]]
perset:
  kind: point_list
  points: [[0, 0, 0.5]]
boundedness:
  schedule: [[4, 10], [8, 20]]
)");
  EXPECT_EQ(cfg.law.pieces().size(), 2U);
  EXPECT_DOUBLE_EQ(cfg.law.duration(), 2.0);
  EXPECT_EQ(cfg.reach.budget, 123U);
  EXPECT_EQ(cfg.reach.seed, 99U);
  EXPECT_DOUBLE_EQ(cfg.reach.dwell_min, 0.1);
  EXPECT_DOUBLE_EQ(cfg.reach.window[0].first, -2.0);
  EXPECT_EQ(cfg.perset.kind, FKind::PointList);
  EXPECT_EQ(cfg.perset.points.size(), 1U);
  EXPECT_EQ(cfg.schedule[1].budget, 20U);
}

TEST(Config, ErrorsCarryLineNumbers) {
  // Index 0 is out of range for 1-based input (line 5).
  std::string bad = kMinimal;
  bad.replace(bad.find("[1, 2, 3, 1.0]"), 14, "[0, 2, 3, 1.0]");
  EXPECT_EQ(error_line(bad), 5);
  // Unknown key.
  EXPECT_EQ(error_line(std::string(kMinimal) + "bogus: 1\n"), 12);
  // Control value outside the box.
  EXPECT_EQ(error_line(std::string(kMinimal) + "law:\n  - {duration: 1, value: [2]}\n"), 13);
  // Wrong window size.
  EXPECT_EQ(error_line(std::string(kMinimal) + "reach:\n  window: [[-1, 1]]\n"), 13);
  // YAML syntax.
  EXPECT_GT(error_line("algebra: [1, 2\n"), 0);
}

TEST(Config, RejectsInvalidStructures) {
  // Jacobi failure: [e1,e2]=e3, [e2,e3]=e1, [e3,e1]=e3 is not a Lie algebra.
  const char* jacobi = R"(algebra:
  dim: 3
  brackets:
    - [1, 2, 3, 1.0]
    - [2, 3, 1, 1.0]
    - [3, 1, 3, 1.0]
drift_diagonal: [0, 0, 0]
controls: [[1, 0, 0]]
control_box: [[-1, 1]]
)";
  EXPECT_THROW(parse_config(jacobi), ConfigError);
  // Drift that is not a derivation.
  std::string notder = kMinimal;
  notder.replace(notder.find("[1, -1, 0]"), 10, "[1, -1, 5]");
  EXPECT_THROW(parse_config(notder), ConfigError);
  // Non-central lattice direction.
  std::string lat = kMinimal;
  lat.replace(lat.find("lattice: [3]"), 12, "lattice: [1]");
  EXPECT_THROW(parse_config(lat), ConfigError);
  // Control box without 0 inside.
  std::string box = kMinimal;
  box.replace(box.find("[-1, 1]"), 7, "[0, 1]");
  EXPECT_THROW(parse_config(box), ConfigError);
  EXPECT_NO_THROW(parse_config(box + "allow_degenerate_control_box: true\n"));
  EXPECT_THROW(load_config("/nonexistent/file.yaml"), ConfigError);
}
