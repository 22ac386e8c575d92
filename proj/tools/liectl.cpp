// Command-line front end: system files in, CSV / SVG / text reports out.

#include "liectl/bundled.hpp"
#include "liectl/config.hpp"
#include "liectl/reach.hpp"
#include "liectl/semidirect.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <set>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace liectl;
namespace fs = std::filesystem;

namespace {

constexpr int kExitPass = 0;
constexpr int kExitFail = 1;
constexpr int kExitConfig = 2;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> budget;
  std::optional<double> t_max;
  std::string grid;
  std::string out;
  std::string example;
  bool backward = false;
  bool report = false;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// "lo:hi,lo:hi,..." -> window ranges.
std::vector<std::pair<double, double>> parse_grid(const std::string& s) {
  std::vector<std::pair<double, double>> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("--grid expects lo:hi[,lo:hi...], got '" + s + "'");
    try {
      const double lo = std::stod(item.substr(0, colon));
      const double hi = std::stod(item.substr(colon + 1));
      if (!(lo < hi)) throw ConfigError("--grid range must have lo < hi");
      out.emplace_back(lo, hi);
    } catch (const std::logic_error&) {
      throw ConfigError("--grid expects numbers, got '" + item + "'");
    }
  }
  return out;
}

void apply_overrides(SystemConfig& cfg, const Options& o) {
  if (o.seed) cfg.reach.seed = *o.seed;
  if (o.budget) cfg.reach.budget = *o.budget;
  if (o.t_max) {
    if (!(*o.t_max > 0.0)) throw ConfigError("--t-max must be positive");
    cfg.reach.t_max = *o.t_max;
  }
  if (!o.grid.empty()) {
    cfg.reach.window = parse_grid(o.grid);
    const auto free = cfg.system->group().dim() - cfg.system->group().lattice().size();
    if (cfg.reach.window.size() != free) {
      throw ConfigError("--grid needs one range per non-lattice coordinate (" + std::to_string(free) + ")");
    }
  }
}

class Output {
 public:
  Output(const std::string& dir, const SystemConfig& cfg) : dir_(dir), header_("# config_hash=" + cfg.hash + " seed=" + std::to_string(cfg.reach.seed)) {
    if (!dir_.empty()) fs::create_directories(dir_);
  }
  bool enabled() const { return !dir_.empty(); }

  std::ofstream open(const std::string& name) const {
    std::ofstream f(fs::path(dir_) / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (fs::path(dir_) / name).string());
    f << header_ << "\n";
    return f;
  }

  /// SVG files start with the same provenance line as a comment.
  std::ofstream open_svg(const std::string& name) const {
    std::ofstream f(fs::path(dir_) / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (fs::path(dir_) / name).string());
    f << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<!-- " << header_.substr(2) << " -->\n";
    return f;
  }

 private:
  std::string dir_;
  std::string header_;
};

const char* tag_of(const WitnessRef& w) {
  switch (w.kind) {
    case WitnessRef::Root: return "root";
    case WitnessRef::Chain: return "chain";
    case WitnessRef::Steer: return "steer";
    case WitnessRef::Loop: return "loop";
    default: return "sample";
  }
}

void write_points(const Output& out, const std::string& name, const Matrix& pts, const std::vector<WitnessRef>& refs,
                  const char* default_tag) {
  auto f = out.open(name);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) f << "x" << i + 1 << ",";
  f << "tag\n";
  for (Eigen::Index c = 0; c < pts.cols(); ++c) {
    for (Eigen::Index i = 0; i < pts.rows(); ++i) f << num(pts(i, c)) << ",";
    f << (static_cast<std::size_t>(c) < refs.size() ? tag_of(refs[static_cast<std::size_t>(c)]) : default_tag) << "\n";
  }
}

void write_grid(const Output& out, const std::string& name, const Grid& g) {
  auto f = out.open(name);
  for (const auto& a : g.axes()) f << "cell_center_x" << a.coord + 1 << ",";
  f << "class\n";
  for (std::size_t c = 0; c < g.size(); ++c) {
    const Vector ctr = g.center(c);
    for (Eigen::Index i = 0; i < ctr.size(); ++i) f << num(ctr(i)) << ",";
    f << to_string(g.cells[c]) << "\n";
  }
}

/// Scatter of the first two non-lattice coordinates (the second is 0 in one dimension),
/// with In cells of the grid (projected) drawn underneath.
void write_svg(const Output& out, const std::string& name, const NilGroup& group, const Matrix& pts,
               const std::optional<Grid>& grid, const std::string& title) {
  std::vector<std::size_t> axes;
  for (std::size_t i = 0; i < group.dim() && axes.size() < 2; ++i) {
    if (!group.is_lattice(i)) axes.push_back(i);
  }
  if (axes.empty()) axes.push_back(0);
  const int size = 600, pad = 40;
  double lo[2] = {-1, -1}, hi[2] = {1, 1};
  if (grid) {
    for (std::size_t k = 0; k < axes.size(); ++k) {
      for (const auto& a : grid->axes()) {
        if (a.coord == axes[k]) {
          lo[k] = a.lo;
          hi[k] = a.hi;
        }
      }
    }
  } else if (pts.cols() > 0) {
    for (std::size_t k = 0; k < axes.size(); ++k) {
      lo[k] = pts.row(static_cast<Eigen::Index>(axes[k])).minCoeff();
      hi[k] = pts.row(static_cast<Eigen::Index>(axes[k])).maxCoeff();
      if (!(hi[k] > lo[k])) {
        lo[k] -= 1.0;
        hi[k] += 1.0;
      }
    }
  }
  auto px = [&](double v, int k) {
    const double s = (v - lo[k]) / (hi[k] - lo[k]);
    return k == 0 ? pad + s * (size - 2 * pad) : size - pad - s * (size - 2 * pad);
  };
  auto coord = [&](const double* x, int k) { return k < static_cast<int>(axes.size()) ? x[axes[static_cast<std::size_t>(k)]] : 0.0; };
  auto f = out.open_svg(name);
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<text x=\"" << pad << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  if (grid) {
    // Projected In cells.
    std::vector<std::size_t> gi;
    for (auto a : axes) {
      for (std::size_t k = 0; k < grid->axes().size(); ++k) {
        if (grid->axes()[k].coord == a) gi.push_back(k);
      }
    }
    std::set<std::pair<std::size_t, std::size_t>> in;
    for (std::size_t c = 0; c < grid->size(); ++c) {
      if (grid->cells[c] != CellClass::In) continue;
      const auto m = grid->multi(c);
      in.insert({m[gi[0]], gi.size() > 1 ? m[gi[1]] : 0});
    }
    const auto& ax = grid->axes()[gi[0]];
    const double w = (size - 2 * pad) * ax.width() / (hi[0] - lo[0]);
    const double h = gi.size() > 1 ? (size - 2 * pad) * grid->axes()[gi[1]].width() / (hi[1] - lo[1]) : 6.0;
    for (const auto& [i, j] : in) {
      const double cx = px(ax.center(i), 0);
      const double cy = gi.size() > 1 ? px(grid->axes()[gi[1]].center(j), 1) : px(0.0, 1);
      f << "<rect x=\"" << num(cx - w / 2) << "\" y=\"" << num(cy - h / 2) << "\" width=\"" << num(w) << "\" height=\""
        << num(h) << "\" fill=\"#cfe3f7\"/>\n";
    }
  }
  const Eigen::Index stride = std::max<Eigen::Index>(1, pts.cols() / 20000);
  for (Eigen::Index c = 0; c < pts.cols(); c += stride) {
    const double* x = pts.col(c).data();
    f << "<circle cx=\"" << num(px(coord(x, 0), 0)) << "\" cy=\"" << num(px(coord(x, 1), 1)) << "\" r=\"0.8\" fill=\"#1f4e79\"/>\n";
  }
  f << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size - 2 * pad << "\" height=\"" << size - 2 * pad
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  f << "<text x=\"" << pad << "\" y=\"" << size - 12 << "\" font-family=\"sans-serif\" font-size=\"12\">x" << axes[0] + 1
    << " in [" << num(lo[0]) << ", " << num(hi[0]) << "]";
  if (axes.size() > 1) f << ", x" << axes[1] + 1 << " in [" << num(lo[1]) << ", " << num(hi[1]) << "]";
  f << "</text>\n</svg>\n";
}

void print_diagnostics(const std::vector<std::string>& d) {
  for (const auto& s : d) std::cout << "  note: " << s << "\n";
}

std::string fmt_vec(const Vector& v) {
  std::string s = "[";
  for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? ", " : "") + num(v(i));
  return s + "]";
}

// ---------------------------------------------------------------------------------------------

int cmd_validate(const SystemConfig& cfg) {
  const auto& sys = *cfg.system;
  const auto& g = sys.group();
  const auto rep = validate_algebra(g.algebra());
  std::cout << "system " << cfg.name << ": dim " << g.dim() << ", nilpotency class " << g.class_k() << ", "
            << sys.m() << " control(s), lattice axes " << g.lattice().size() << "\n";
  std::cout << "  antisymmetry residual " << num(rep.antisymmetry_residual) << ", Jacobi residual " << num(rep.jacobi_residual)
            << "\n";
  std::cout << "  drift is a derivation: yes\n";
  if (cfg.semidirect) std::cout << "  torus factor of dimension " << cfg.semidirect->torus_dim() << ": valid action\n";
  std::cout << "valid\n";
  return rep.passed() ? kExitPass : kExitFail;
}

int cmd_decompose(const SystemConfig& cfg, const Output& out) {
  const auto& sys = *cfg.system;
  const auto& alg = sys.group().algebra();
  const auto dec = spectral_decompose(alg, sys.derivation());
  std::ostringstream r;
  r << "system " << cfg.name << "\n";
  r << "spectral levels (real part: dimension):\n";
  for (const auto& l : dec.levels) r << "  " << num(l.lambda) << ": " << l.basis.cols() << "\n";
  r << "dim g+ = " << dec.plus.cols() << ", dim g0 = " << dec.zero.cols() << ", dim g- = " << dec.minus.cols() << "\n";
  for (const auto& w : dec.warnings) r << "  warning: " << w << "\n";
  const auto grading = check_grading(alg, dec);
  r << "grading [g_a, g_b] in g_(a+b): " << (grading.ok ? "ok" : "FAILED") << " (residual " << num(grading.residual) << ")\n";
  r << "G0 compact: " << (g0_compact(sys) ? "yes" : "no") << "\n";
  bool ok = grading.ok;
  try {
    const auto tf = triangular_form(sys);
    r << "block-triangular form: " << tf.blocks() << " blocks of sizes";
    for (std::size_t i = 0; i < tf.blocks(); ++i) r << " " << tf.block_size(i);
    r << ", upper-block residual " << num(tf.upper_residual) << "\n";
  } catch (const InputError& e) {
    r << "block-triangular form: FAILED (" << e.what() << ")\n";
    ok = false;
  }
  try {
    const auto split = build_from_decomposable(sys);
    r << "semidirect split: torus of dimension " << split.torus_axes.size() << " acting on a " << split.pm_basis.cols()
      << "-dimensional factor\n";
  } catch (const NotApplicable& e) {
    r << "semidirect split: not applicable (" << e.what() << ")\n";
  } catch (const Unsupported& e) {
    r << "semidirect split: unsupported (" << e.what() << ")\n";
  }
  std::cout << r.str();
  if (out.enabled()) out.open("decompose.txt") << r.str();
  return ok ? kExitPass : kExitFail;
}

int cmd_simulate(const SystemConfig& cfg, const Options& o, const Output& out) {
  const auto& sys = *cfg.system;
  ControlLaw law = cfg.law;
  const double horizon = o.t_max ? *o.t_max : (law.empty() ? cfg.reach.t_max : law.duration());
  if (law.duration() < horizon) {
    std::vector<Piece> pieces(law.pieces());
    pieces.push_back({horizon - law.duration(), Vector::Zero(static_cast<Eigen::Index>(sys.m()))});
    law = ControlLaw(std::move(pieces));
  }
  law = law.truncated(horizon);
  if (cfg.semidirect) {
    const auto tr = simulate_semidirect(*cfg.semidirect, {Vector::Zero(static_cast<Eigen::Index>(cfg.semidirect->torus_dim())), cfg.initial}, law);
    std::cout << "semidirect trajectory to t = " << num(horizon) << ": h = " << fmt_vec(tr.end().h) << ", x = " << fmt_vec(tr.end().x)
              << "\n";
    if (out.enabled()) {
      auto f = out.open("trajectory.csv");
      f << "t";
      for (std::size_t i = 0; i < cfg.semidirect->torus_dim(); ++i) f << ",h" << i + 1;
      for (Eigen::Index i = 0; i < sys.n(); ++i) f << ",x" << i + 1;
      f << "\n";
      for (std::size_t m = 0; m < tr.times.size(); ++m) {
        f << num(tr.times[m]);
        for (Eigen::Index i = 0; i < tr.points[m].h.size(); ++i) f << "," << num(tr.points[m].h(i));
        for (Eigen::Index i = 0; i < tr.points[m].x.size(); ++i) f << "," << num(tr.points[m].x(i));
        f << "\n";
      }
    }
    return kExitPass;
  }
  const auto tr = simulate(sys, {cfg.initial}, law);
  std::cout << "trajectory to t = " << num(horizon) << ": end " << fmt_vec(tr.end()) << "\n";
  int code = kExitPass;
  try {
    const auto tri = triangular_solve(sys, cfg.initial, law, kDefaultStep);
    double gap = 0.0;
    for (std::size_t m = 0; m < tri.points.size(); ++m) gap = std::max(gap, sys.group().distance(tri.points[m], tr.points[m]));
    std::cout << "block-triangular solver gap " << num(gap) << "\n";
  } catch (const InputError& e) {
    std::cout << "block-triangular solver not applicable: " << e.what() << "\n";
  }
  if (out.enabled()) {
    auto f = out.open("trajectory.csv");
    f << "t";
    for (Eigen::Index i = 0; i < sys.n(); ++i) f << ",x" << i + 1;
    f << "\n";
    for (std::size_t m = 0; m < tr.times.size(); ++m) {
      f << num(tr.times[m]);
      for (Eigen::Index i = 0; i < sys.n(); ++i) f << "," << num(tr.points[m](i));
      f << "\n";
    }
    Matrix pts(sys.n(), static_cast<Eigen::Index>(tr.points.size()));
    for (std::size_t m = 0; m < tr.points.size(); ++m) pts.col(static_cast<Eigen::Index>(m)) = tr.points[m];
    write_svg(out, "trajectory.svg", sys.group(), pts, std::nullopt, cfg.name + " trajectory");
  }
  return code;
}

int cmd_reach(const SystemConfig& cfg, const Options& o, const Output& out) {
  const auto& sys = *cfg.system;
  const auto dir = o.backward ? Direction::Backward : Direction::Forward;
  const auto est = sample_reachable(sys, cfg.initial, cfg.reach, dir);
  std::cout << (o.backward ? "backward" : "forward") << " reachable sample: " << est.size() << " points, bbox extent "
            << fmt_vec(est.bbox.extent()) << "\n";
  if (out.enabled()) {
    write_points(out, "reach_points.csv", est.points, {}, "sample");
    write_svg(out, "reach.svg", sys.group(), est.points, std::nullopt, cfg.name + " reachable sample");
  }
  return kExitPass;
}

int cmd_perset(const SystemConfig& cfg, const Options& o, const Output& out) {
  const auto& sys = *cfg.system;
  const auto est = estimate_per_set(sys, cfg.perset, cfg.reach, !cfg.reach.window.empty());
  std::cout << "periodic-point estimate: " << est.size() << " points, bbox extent " << fmt_vec(est.bbox.extent()) << "\n";
  print_diagnostics(est.diagnostics);
  if (est.grid) {
    std::cout << "  grid cells in " << est.grid->count(CellClass::In) << ", out " << est.grid->count(CellClass::Out) << ", unknown "
              << est.grid->count(CellClass::Unknown) << "\n";
  }
  int code = est.size() > 0 ? kExitPass : kExitFail;
  if (out.enabled()) {
    write_points(out, "perset_points.csv", est.points, est.witnesses, "sample");
    if (est.grid) write_grid(out, "perset_grid.csv", *est.grid);
    write_svg(out, "perset.svg", sys.group(), est.points, est.grid, cfg.name + " periodic points");
  }
  if (o.report) {
    if (cfg.schedule.size() < 2) throw ConfigError("--report needs boundedness.schedule in the config");
    const auto rep = boundedness_report(sys, cfg.schedule, cfg.reach);
    std::ostringstream r;
    r << "boundedness verdict: " << to_string(rep.verdict) << "\n";
    r << "G0 compact: " << (rep.g0_compact ? "yes" : "no") << "; agrees with compactness: " << (rep.agrees_with_compactness ? "yes" : "no")
      << "\n";
    for (std::size_t i = 0; i < rep.schedule.size(); ++i) {
      r << "  T_max " << num(rep.schedule[i].t_max) << " budget " << rep.schedule[i].budget << " extent " << fmt_vec(rep.extents[i])
        << "\n";
    }
    r << "audited witnesses " << rep.audited << ", failures " << rep.audit_failures << ", largest certified |central coordinate| "
      << num(rep.max_central_witness) << "\n";
    std::cout << r.str();
    if (out.enabled()) out.open("boundedness.txt") << r.str();
    if (!rep.agrees_with_compactness || rep.audit_failures > 0) code = kExitFail;
  }
  return code;
}

int cmd_controlset(const SystemConfig& cfg, const Output& out) {
  const auto& sys = *cfg.system;
  const auto cs = estimate_control_set(sys, cfg.reach);
  const auto& g = *cs.region.grid;
  std::cout << "control set estimate: " << g.count(CellClass::In) << " grid cells in, " << cs.region.size()
            << " sample points inside\n";
  std::cout << "  no-return check: " << cs.no_return_violations << " violations over " << cs.no_return_checked << " samples\n";
  print_diagnostics(cs.region.diagnostics);
  if (out.enabled()) {
    write_points(out, "controlset_points.csv", cs.region.points, {}, "sample");
    write_grid(out, "controlset_grid.csv", g);
    write_svg(out, "controlset.svg", sys.group(), cs.region.points, cs.region.grid, cfg.name + " control set");
  }
  return cs.no_return_violations == 0 ? kExitPass : kExitFail;
}

// ---------------------------------------------------------------------------------------------
// Worked examples with pinned thresholds.

constexpr double kAgreementPlane = 0.95;
constexpr double kAgreementQuotient = 0.93;
constexpr double kCollar = 0.05;
constexpr double kCentralWitness = 10.0;
constexpr std::size_t kAuditCount = 200;

struct Checker {
  int failures = 0;
  void check(bool ok, const std::string& what) {
    std::cout << (ok ? "PASS " : "FAIL ") << what << "\n";
    failures += !ok;
  }
};

std::vector<SchedulePoint> default_schedule(std::size_t budget) {
  std::vector<SchedulePoint> s;
  for (double t : {8.0, 16.0, 32.0, 64.0, 128.0}) s.push_back({t, budget});
  return s;
}

std::size_t audit_sample(const RegionEstimate& est) {
  std::size_t bad = 0;
  for (std::size_t k = 0; k < kAuditCount && est.size() > 0; ++k) bad += !audit_witness(est, k * est.size() / kAuditCount).ok;
  return bad;
}

int cmd_verify(const Options& o) {
  ReachParams p;
  p.seed = o.seed.value_or(1);
  p.budget = o.budget.value_or(20000);
  p.t_max = o.t_max.value_or(8.0);
  p.window = {{-1.5, 1.5}, {-1.5, 1.5}};
  const BoxTarget square{{{-1.0, 1.0}, {-1.0, 1.0}}};
  const std::size_t sched_budget = std::min<std::size_t>(p.budget, 2000);
  Checker c;
  char buf[160];
  if (o.example == "r2") {
    const auto sys = bundled::r2();
    const auto cs = estimate_control_set(sys, p);
    const auto ca = grid_agreement(*cs.region.grid, square, kCollar);
    std::snprintf(buf, sizeof buf, "control set vs (-1,1)x[-1,1]: agreement %.4f >= %.2f", ca.fraction, kAgreementPlane);
    c.check(ca.fraction >= kAgreementPlane, buf);
    c.check(cs.no_return_violations == 0, "no-return violations: " + std::to_string(cs.no_return_violations));
    const auto per = estimate_per_set(sys, PerSetQuery{}, p);
    const auto pa = grid_agreement(*per.grid, square, kCollar);
    std::snprintf(buf, sizeof buf, "periodic set vs (-1,1)^2: agreement %.4f >= %.2f", pa.fraction, kAgreementPlane);
    c.check(pa.fraction >= kAgreementPlane, buf);
    c.check(audit_sample(per) == 0, "witness audit of " + std::to_string(kAuditCount) + " points");
  } else if (o.example == "heisenberg-quotient") {
    const auto sys = bundled::heisenberg(true);
    PerSetQuery q;
    q.kind = FKind::CentralSubgroup;
    const auto per = estimate_per_set(sys, q, p);
    const auto pa = grid_agreement(*per.grid, square, kCollar);
    std::snprintf(buf, sizeof buf, "periodic set vs (-1,1)^2 x R/Z: agreement %.4f >= %.2f", pa.fraction, kAgreementQuotient);
    c.check(pa.fraction >= kAgreementQuotient, buf);
    c.check(audit_sample(per) == 0, "witness audit of " + std::to_string(kAuditCount) + " points");
    ReachParams bp = p;
    const auto rep = boundedness_report(sys, default_schedule(sched_budget), bp);
    c.check(rep.verdict == Verdict::Bounded, std::string("boundedness verdict ") + to_string(rep.verdict));
    c.check(rep.agrees_with_compactness, "verdict agrees with compact G0");
  } else if (o.example == "heisenberg") {
    const auto sys = bundled::heisenberg(false);
    ReachParams bp = p;
    bp.window.push_back({-1.5, 1.5});
    const auto rep = boundedness_report(sys, default_schedule(sched_budget), bp);
    c.check(rep.verdict == Verdict::Unbounded, std::string("boundedness verdict ") + to_string(rep.verdict));
    c.check(rep.agrees_with_compactness, "verdict agrees with noncompact G0");
    std::snprintf(buf, sizeof buf, "certified central coordinate %.3f > %.0f", rep.max_central_witness, kCentralWitness);
    c.check(rep.max_central_witness > kCentralWitness && rep.audit_failures == 0, buf);
  } else if (o.example == "line-integrator") {
    const auto sys = bundled::line_integrator();
    ReachParams bp = p;
    bp.window = {{-1.5, 1.5}};
    const auto rep = boundedness_report(sys, default_schedule(std::min<std::size_t>(sched_budget, 500)), bp);
    c.check(rep.verdict == Verdict::Unbounded, std::string("boundedness verdict ") + to_string(rep.verdict));
    c.check(rep.agrees_with_compactness, "verdict agrees with noncompact G0");
  } else {
    throw ConfigError("unknown example '" + o.example + "' (r2, heisenberg-quotient, heisenberg, line-integrator)");
  }
  std::cout << (c.failures == 0 ? "example verified\n" : "example FAILED\n");
  return c.failures == 0 ? kExitPass : kExitFail;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Linear control systems on nilpotent Lie groups: simulation, reachable and periodic sets"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub, bool need_config) {
    auto* c = sub->add_option("--config", o.config, "system file (YAML)");
    if (need_config) c->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "master seed");
    sub->add_option("--budget", o.budget, "samples per direction");
    sub->add_option("--t-max", o.t_max, "time horizon");
    sub->add_option("--grid", o.grid, "window lo:hi per non-lattice coordinate, comma separated");
    sub->add_option("--out", o.out, "output directory");
  };
  auto* validate = app.add_subcommand("validate", "check a system file");
  auto* decompose = app.add_subcommand("decompose", "spectral, block-triangular and semidirect structure");
  auto* sim = app.add_subcommand("simulate", "integrate the configured control law");
  auto* reach = app.add_subcommand("reach", "sample the reachable set from the initial point");
  auto* perset = app.add_subcommand("perset", "estimate the periodic-point set");
  auto* control = app.add_subcommand("controlset", "estimate the control set containing the identity");
  auto* verify = app.add_subcommand("verify-example", "run a worked example against its known answer");
  for (auto* s : {validate, decompose, sim, reach, perset, control}) add_common(s, true);
  add_common(verify, false);
  reach->add_flag("--backward", o.backward, "sample the time-reversed system");
  perset->add_flag("--report", o.report, "also run the boundedness schedule from the config");
  verify->add_option("example", o.example, "r2 | heisenberg-quotient | heisenberg | line-integrator")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitPass : kExitConfig;
  }

  try {
    if (verify->parsed()) return cmd_verify(o);
    SystemConfig cfg = load_config(o.config);
    apply_overrides(cfg, o);
    const Output out(o.out, cfg);
    if (validate->parsed()) return cmd_validate(cfg);
    if (decompose->parsed()) return cmd_decompose(cfg, out);
    if (sim->parsed()) return cmd_simulate(cfg, o, out);
    if (reach->parsed()) return cmd_reach(cfg, o, out);
    if (perset->parsed()) return cmd_perset(cfg, o, out);
    if (control->parsed()) return cmd_controlset(cfg, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFail;
  }
  return kExitFail;
}
