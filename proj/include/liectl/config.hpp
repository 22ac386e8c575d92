#pragma once

#include "liectl/linsys.hpp"
#include "liectl/reach.hpp"
#include "liectl/semidirect.hpp"

#include <yaml-cpp/yaml.h>

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace liectl {

/// Bad or inconsistent configuration; `line` is 1-based, 0 when unknown.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& msg, int line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

/// A parsed system file. Basis indices in the file are 1-based.
struct SystemConfig {
  std::string name;
  std::optional<LinearSystem> system;
  std::optional<SemidirectSpec> semidirect;
  Vector initial;
  ControlLaw law;
  ReachParams reach;
  PerSetQuery perset;
  std::vector<SchedulePoint> schedule;
  std::string hash;  // of the file text, for output headers
};

/// 64-bit FNV-1a, printed as 16 hex digits.
inline std::string content_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace config_detail {

inline int line_of(const YAML::Node& n) { return n.Mark().line >= 0 ? n.Mark().line + 1 : 0; }

template <class T>
T scalar(const YAML::Node& n, const std::string& what) {
  if (!n.IsScalar()) throw ConfigError(what + " must be a scalar", line_of(n));
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(what + " has the wrong type: '" + n.Scalar() + "'", line_of(n));
  }
}

inline Vector vec(const YAML::Node& n, const std::string& what, Eigen::Index expect = -1) {
  if (!n.IsSequence()) throw ConfigError(what + " must be a list of numbers", line_of(n));
  Vector v(static_cast<Eigen::Index>(n.size()));
  for (std::size_t i = 0; i < n.size(); ++i) v(static_cast<Eigen::Index>(i)) = scalar<double>(n[i], what);
  if (expect >= 0 && v.size() != expect) {
    throw ConfigError(what + " needs " + std::to_string(expect) + " entries, got " + std::to_string(v.size()), line_of(n));
  }
  return v;
}

inline Matrix mat(const YAML::Node& n, const std::string& what, Eigen::Index rows, Eigen::Index cols) {
  if (!n.IsSequence() || static_cast<Eigen::Index>(n.size()) != rows) {
    throw ConfigError(what + " must be a list of " + std::to_string(rows) + " rows", line_of(n));
  }
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) m.row(r) = vec(n[static_cast<std::size_t>(r)], what + " row", cols).transpose();
  return m;
}

inline std::vector<std::pair<double, double>> ranges(const YAML::Node& n, const std::string& what) {
  if (!n.IsSequence()) throw ConfigError(what + " must be a list of [lo, hi] pairs", line_of(n));
  std::vector<std::pair<double, double>> out;
  for (const auto& r : n) {
    const Vector v = vec(r, what, 2);
    if (!(v(0) <= v(1))) throw ConfigError(what + " range must have lo <= hi", line_of(r));
    out.emplace_back(v(0), v(1));
  }
  return out;
}

inline std::size_t index1(const YAML::Node& n, std::size_t dim, const std::string& what) {
  const auto i = scalar<long>(n, what);
  if (i < 1 || static_cast<std::size_t>(i) > dim) {
    throw ConfigError(what + " must be between 1 and " + std::to_string(dim), line_of(n));
  }
  return static_cast<std::size_t>(i - 1);
}

inline void known_keys(const YAML::Node& n, const std::vector<std::string>& keys, const std::string& where) {
  if (!n.IsMap()) throw ConfigError(where + " must be a mapping", line_of(n));
  for (const auto& kv : n) {
    const auto k = kv.first.as<std::string>();
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
      throw ConfigError("unknown key '" + k + "' in " + where, line_of(kv.first));
    }
  }
}

inline LieAlgebra parse_algebra(const YAML::Node& n) {
  known_keys(n, {"dim", "brackets", "labels"}, "algebra");
  if (!n["dim"]) throw ConfigError("algebra.dim is required", line_of(n));
  const auto dim = scalar<long>(n["dim"], "algebra.dim");
  if (dim < 1) throw ConfigError("algebra.dim must be positive", line_of(n["dim"]));
  const auto d = static_cast<std::size_t>(dim);
  std::vector<BracketEntry> entries;
  if (const auto b = n["brackets"]) {
    if (!b.IsSequence()) throw ConfigError("algebra.brackets must be a list of [i, j, k, coeff]", line_of(b));
    for (const auto& e : b) {
      if (!e.IsSequence() || e.size() != 4) throw ConfigError("bracket entry must be [i, j, k, coeff]", line_of(e));
      entries.push_back({index1(e[0], d, "bracket index i"), index1(e[1], d, "bracket index j"),
                         index1(e[2], d, "bracket index k"), scalar<double>(e[3], "bracket coefficient")});
    }
  }
  std::vector<std::string> labels;
  if (const auto l = n["labels"]) {
    if (!l.IsSequence()) throw ConfigError("algebra.labels must be a list", line_of(l));
    for (const auto& s : l) labels.push_back(scalar<std::string>(s, "label"));
  }
  try {
    LieAlgebra alg = LieAlgebra::from_brackets(d, entries, labels);
    const auto rep = validate_algebra(alg);
    if (!rep.jacobi()) {
      throw ConfigError("brackets violate the Jacobi identity (residual " + std::to_string(rep.jacobi_residual) + ")",
                        line_of(n));
    }
    return alg;
  } catch (const InputError& e) {
    throw ConfigError(e.what(), line_of(n));
  }
}

}  // namespace config_detail

/// Parses a system description. Throws ConfigError with the offending line.
inline SystemConfig parse_config(const std::string& text) {
  using namespace config_detail;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(std::string("YAML syntax: ") + e.msg, e.mark.line >= 0 ? e.mark.line + 1 : 0);
  }
  if (!root.IsMap()) throw ConfigError("config must be a mapping", 1);
  known_keys(root, {"name", "algebra", "lattice", "drift", "drift_diagonal", "controls", "control_box",
                    "allow_degenerate_control_box", "torus", "initial", "law", "reach", "perset", "boundedness"},
             "config");
  SystemConfig cfg;
  cfg.hash = content_hash(text);
  cfg.name = root["name"] ? scalar<std::string>(root["name"], "name") : "system";
  if (!root["algebra"]) throw ConfigError("'algebra' is required", 1);
  LieAlgebra alg = parse_algebra(root["algebra"]);
  const auto n = alg.n();
  const auto d = alg.dim();

  std::vector<std::size_t> lattice;
  if (const auto l = root["lattice"]) {
    if (!l.IsSequence()) throw ConfigError("lattice must be a list of basis indices", line_of(l));
    for (const auto& i : l) lattice.push_back(index1(i, d, "lattice index"));
  }

  Matrix drift;
  if (root["drift"] && root["drift_diagonal"]) throw ConfigError("give drift or drift_diagonal, not both", line_of(root["drift"]));
  if (const auto m = root["drift"]) {
    drift = mat(m, "drift", n, n);
  } else if (const auto dd = root["drift_diagonal"]) {
    drift = vec(dd, "drift_diagonal", n).asDiagonal();
  } else {
    throw ConfigError("'drift' or 'drift_diagonal' is required", 1);
  }

  if (!root["controls"]) throw ConfigError("'controls' is required", 1);
  const auto cn = root["controls"];
  if (!cn.IsSequence() || cn.size() == 0) throw ConfigError("controls must be a non-empty list of vectors", line_of(cn));
  std::vector<Vector> controls;
  for (const auto& c : cn) controls.push_back(vec(c, "control vector", n));

  if (!root["control_box"]) throw ConfigError("'control_box' is required", 1);
  const auto box = ranges(root["control_box"], "control_box");
  SystemOptions opts;
  if (const auto a = root["allow_degenerate_control_box"]) opts.allow_degenerate_omega = scalar<bool>(a, "allow_degenerate_control_box");

  const int sys_line = line_of(root["drift"] ? root["drift"] : root["drift_diagonal"]);
  try {
    cfg.system.emplace(NilGroup(std::move(alg), lattice), drift, controls, ControlBox(box), opts);
  } catch (const InputError& e) {
    throw ConfigError(e.what(), sys_line);
  } catch (const Unsupported& e) {
    throw ConfigError(e.what(), line_of(root["algebra"]));
  }
  const LinearSystem& sys = *cfg.system;

  if (const auto t = root["torus"]) {
    known_keys(t, {"dim", "rho", "controls"}, "torus");
    if (!t["dim"]) throw ConfigError("torus.dim is required", line_of(t));
    const auto td = scalar<long>(t["dim"], "torus.dim");
    if (td < 1) throw ConfigError("torus.dim must be positive", line_of(t["dim"]));
    std::vector<Matrix> rho;
    if (const auto r = t["rho"]) {
      if (!r.IsSequence()) throw ConfigError("torus.rho must be a list of matrices", line_of(r));
      for (const auto& a : r) rho.push_back(mat(a, "rho generator", n, n));
    } else {
      rho.assign(static_cast<std::size_t>(td), Matrix::Zero(n, n));
    }
    std::vector<Vector> ty;
    if (const auto c = t["controls"]) {
      if (!c.IsSequence()) throw ConfigError("torus.controls must be a list of vectors", line_of(c));
      for (const auto& y : c) ty.push_back(vec(y, "torus control", td));
    } else {
      ty.assign(sys.m(), Vector::Zero(td));
    }
    try {
      cfg.semidirect.emplace(static_cast<std::size_t>(td), rho, sys, ty);
    } catch (const InputError& e) {
      throw ConfigError(e.what(), line_of(t));
    }
  }

  cfg.initial = root["initial"] ? vec(root["initial"], "initial", n) : Vector(Vector::Zero(n));
  if (const auto l = root["law"]) {
    if (!l.IsSequence()) throw ConfigError("law must be a list of {duration, value} pieces", line_of(l));
    std::vector<Piece> pieces;
    for (const auto& p : l) {
      known_keys(p, {"duration", "value"}, "law piece");
      if (!p["duration"] || !p["value"]) throw ConfigError("law piece needs duration and value", line_of(p));
      const double dur = scalar<double>(p["duration"], "duration");
      const Vector v = vec(p["value"], "control value", static_cast<Eigen::Index>(sys.m()));
      if (!(dur > 0.0)) throw ConfigError("piece duration must be positive", line_of(p["duration"]));
      if (!sys.omega().contains(v)) throw ConfigError("control value outside control_box", line_of(p["value"]));
      pieces.push_back({dur, v});
    }
    cfg.law = ControlLaw(std::move(pieces));
  }

  if (const auto r = root["reach"]) {
    known_keys(r, {"t_max", "budget", "seed", "step", "epsilon", "window", "dwell", "vertex_prob", "threads"}, "reach");
    auto& p = cfg.reach;
    if (r["t_max"]) p.t_max = scalar<double>(r["t_max"], "t_max");
    if (r["budget"]) p.budget = scalar<std::size_t>(r["budget"], "budget");
    if (r["seed"]) p.seed = scalar<std::uint64_t>(r["seed"], "seed");
    if (r["step"]) p.step = scalar<double>(r["step"], "step");
    if (r["epsilon"]) p.epsilon = scalar<double>(r["epsilon"], "epsilon");
    if (r["vertex_prob"]) p.vertex_prob = scalar<double>(r["vertex_prob"], "vertex_prob");
    if (r["threads"]) p.threads = scalar<unsigned>(r["threads"], "threads");
    if (r["dwell"]) {
      const Vector dw = vec(r["dwell"], "dwell", 2);
      if (!(dw(0) > 0.0 && dw(0) <= dw(1))) throw ConfigError("dwell must be [lo, hi] with 0 < lo <= hi", line_of(r["dwell"]));
      p.dwell_min = dw(0);
      p.dwell_max = dw(1);
    }
    if (r["window"]) {
      p.window = ranges(r["window"], "window");
      const auto free = d - sys.group().lattice().size();
      if (p.window.size() != free) {
        throw ConfigError("window needs one range per non-lattice coordinate (" + std::to_string(free) + ")",
                          line_of(r["window"]));
      }
      for (const auto& [lo, hi] : p.window) {
        if (!(lo < hi)) throw ConfigError("window ranges must have lo < hi", line_of(r["window"]));
      }
    }
    if (!(p.t_max > 0.0)) throw ConfigError("t_max must be positive", line_of(r));
    if (!(p.step > 0.0)) throw ConfigError("step must be positive", line_of(r));
    if (!(p.epsilon > 0.0)) throw ConfigError("epsilon must be positive", line_of(r));
    if (!(p.vertex_prob >= 0.0 && p.vertex_prob <= 1.0)) throw ConfigError("vertex_prob must lie in [0, 1]", line_of(r));
  }

  cfg.perset.epsilon = cfg.reach.epsilon;
  if (const auto q = root["perset"]) {
    known_keys(q, {"kind", "epsilon", "points"}, "perset");
    if (q["kind"]) {
      const auto k = scalar<std::string>(q["kind"], "perset.kind");
      if (k == "identity") cfg.perset.kind = FKind::Identity;
      else if (k == "central_subgroup") cfg.perset.kind = FKind::CentralSubgroup;
      else if (k == "point_list") cfg.perset.kind = FKind::PointList;
      else throw ConfigError("perset.kind must be identity, central_subgroup or point_list", line_of(q["kind"]));
    }
    if (q["epsilon"]) cfg.perset.epsilon = scalar<double>(q["epsilon"], "perset.epsilon");
    if (!(cfg.perset.epsilon > 0.0)) throw ConfigError("perset.epsilon must be positive", line_of(q));
    if (const auto pts = q["points"]) {
      if (!pts.IsSequence()) throw ConfigError("perset.points must be a list of points", line_of(pts));
      for (const auto& pt : pts) cfg.perset.points.push_back(vec(pt, "perset point", n));
    }
    if (cfg.perset.kind == FKind::PointList && cfg.perset.points.empty()) {
      throw ConfigError("point_list needs at least one point", line_of(q));
    }
  }

  if (const auto b = root["boundedness"]) {
    known_keys(b, {"schedule"}, "boundedness");
    const auto s = b["schedule"];
    if (!s || !s.IsSequence()) throw ConfigError("boundedness.schedule must be a list of [t_max, budget]", line_of(b));
    for (const auto& e : s) {
      if (!e.IsSequence() || e.size() != 2) throw ConfigError("schedule entry must be [t_max, budget]", line_of(e));
      cfg.schedule.push_back({scalar<double>(e[0], "schedule t_max"), scalar<std::size_t>(e[1], "schedule budget")});
    }
  }
  return cfg;
}

inline SystemConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace liectl
