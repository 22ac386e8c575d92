#pragma once

#include "liectl/linsys.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace liectl {

inline constexpr double kRhoTolerance = 1e-8;
inline constexpr double kSubalgebraTolerance = 1e-9;

/// System on H x_rho u with H = (R/Z)^d:
///   h' = sum_j u_j Y_j,   x' = D x + sum_j u_j (rho(h) Z_j)(x),   rho(h) = exp(sum_i h_i A_i).
/// The u-part (nil group, drift, Z_j, control box) is held as a LinearSystem.
class SemidirectSpec {
 public:
  SemidirectSpec(std::size_t torus_dim, std::vector<Matrix> rho_generators, LinearSystem fiber,
                 std::vector<Vector> torus_controls)
      : d_(torus_dim), rho_(std::move(rho_generators)), fiber_(std::move(fiber)), torus_controls_(std::move(torus_controls)) {
    const auto n = fiber_.n();
    if (rho_.size() != d_) throw InputError("expected " + std::to_string(d_) + " rho generators");
    if (torus_controls_.size() != fiber_.m()) throw InputError("need one torus control per nil control");
    for (const auto& y : torus_controls_) linalg::require_size(y, static_cast<Eigen::Index>(d_), "torus control");
    const Matrix eye = Matrix::Identity(n, n);
    for (std::size_t i = 0; i < d_; ++i) {
      const Matrix& a = rho_[i];
      linalg::require_square(a, n, "rho generator");
      const auto der = is_derivation(fiber_.group().algebra(), a);
      if (!der.ok) {
        throw InputError("A" + std::to_string(i + 1) + " is not a derivation, so rho(h) is not an automorphism (residual " +
                         std::to_string(der.residual) + ")");
      }
      const Matrix ea = linalg::expm(a);
      const double aut = automorphism_residual(fiber_.group().algebra(), ea);
      if (!(aut < kRhoTolerance)) {
        throw InputError("exp(A" + std::to_string(i + 1) + ") is not an automorphism (residual " + std::to_string(aut) + ")");
      }
      const double per = linalg::max_abs(ea - eye);
      if (!(per < kRhoTolerance)) {
        throw InputError("exp(A" + std::to_string(i + 1) + ") != I (residual " + std::to_string(per) + ")");
      }
      for (auto j : fiber_.group().lattice()) {
        if (linalg::max_abs(a.col(static_cast<Eigen::Index>(j))) > kRhoTolerance) {
          throw InputError("rho must fix the lattice direction e" + std::to_string(j + 1));
        }
      }
      for (std::size_t k = i + 1; k < d_; ++k) {
        const double c = linalg::max_abs(a * rho_[k] - rho_[k] * a);
        if (!(c < kRhoTolerance)) throw InputError("rho generators do not commute");
      }
    }
  }

  std::size_t torus_dim() const { return d_; }
  const std::vector<Matrix>& rho_generators() const { return rho_; }
  const LinearSystem& fiber() const { return fiber_; }
  const NilGroup& nil() const { return fiber_.group(); }
  const std::vector<Vector>& torus_controls() const { return torus_controls_; }

  /// rho(h) as a matrix on u.
  Matrix rho(const Vector& h) const {
    const auto n = fiber_.n();
    if (d_ == 0) return Matrix::Identity(n, n);
    Matrix gen = Matrix::Zero(n, n);
    for (std::size_t i = 0; i < d_; ++i) gen += h(static_cast<Eigen::Index>(i)) * rho_[i];
    return linalg::expm(gen);
  }

  /// sum_j u_j Y_j.
  Vector torus_velocity(const Vector& u) const {
    Vector y = Vector::Zero(static_cast<Eigen::Index>(d_));
    for (std::size_t j = 0; j < torus_controls_.size(); ++j) y += u(static_cast<Eigen::Index>(j)) * torus_controls_[j];
    return y;
  }

 private:
  std::size_t d_;
  std::vector<Matrix> rho_;
  LinearSystem fiber_;
  std::vector<Vector> torus_controls_;
};

struct SemidirectPoint {
  Vector h;  // torus coordinates in [0, 1)
  Vector x;  // coordinates on u
};

inline Vector torus_reduce(Vector h) {
  for (auto& v : h) {
    v -= std::floor(v);
    if (v >= 1.0) v = 0.0;
  }
  return h;
}

/// (h1, x1)(h2, x2) = (h1 + h2, x1 * rho(h1) x2).
inline SemidirectPoint semidirect_product(const SemidirectSpec& spec, const SemidirectPoint& a, const SemidirectPoint& b) {
  const NilGroup& g = spec.nil();
  return {torus_reduce(a.h + b.h), g.product({a.x}, g.reduce(spec.rho(a.h) * b.x)).coords};
}

/// Sup-norm distance, circle distance on the torus and on lattice coordinates of u.
inline double semidirect_distance(const SemidirectSpec& spec, const SemidirectPoint& a, const SemidirectPoint& b) {
  double d = spec.nil().distance(a.x, b.x);
  for (Eigen::Index i = 0; i < a.h.size(); ++i) {
    double diff = std::fmod(std::abs(a.h(i) - b.h(i)), 1.0);
    d = std::max(d, std::min(diff, 1.0 - diff));
  }
  return d;
}

struct SemidirectTrajectory {
  std::vector<double> times;
  std::vector<SemidirectPoint> points;
  ControlLaw law;

  const SemidirectPoint& end() const { return points.back(); }
};

/// RK4 on the x-equation with the exact torus motion h(t) = h0 + t Y on each piece.
inline SemidirectTrajectory simulate_semidirect(const SemidirectSpec& spec, const SemidirectPoint& p0,
                                                const ControlLaw& law, double step = kDefaultStep) {
  if (!(step > 0.0)) throw InputError("integration step must be positive");
  const LinearSystem& sys = spec.fiber();
  linalg::require_size(p0.h, static_cast<Eigen::Index>(spec.torus_dim()), "initial torus point");
  linalg::require_size(p0.x, sys.n(), "initial state");
  for (const auto& p : law.pieces()) {
    if (!sys.omega().contains(p.value)) throw InputError("control value outside the control range");
  }
  const auto n = static_cast<std::size_t>(sys.n());
  FieldKernel kernel(sys);
  SemidirectTrajectory tr;
  tr.law = law;
  Vector h = torus_reduce(p0.h);
  Vector x = sys.group().reduce(p0.x).coords;
  tr.times.push_back(0.0);
  tr.points.push_back({h, x});
  std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);
  double t0 = 0.0;
  for (const auto& piece : law.pieces()) {
    const Vector z = sys.control_vector(piece.value);
    const Vector vel = spec.torus_velocity(piece.value);
    const Vector h_start = h;
    const std::size_t ns = substeps(piece.duration, step);
    const double dt = piece.duration / double(ns);
    auto z_at = [&](double s) -> Vector { return spec.rho(h_start + s * vel) * z; };
    Vector z_lo = z_at(0.0);
    for (std::size_t s = 0; s < ns; ++s) {
      const Vector z_mid = z_at((double(s) + 0.5) * dt);
      const Vector z_hi = z_at(double(s + 1) * dt);
      kernel.eval(x.data(), z_lo.data(), k1.data());
      for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * dt * k1[i];
      kernel.eval(tmp.data(), z_mid.data(), k2.data());
      for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * dt * k2[i];
      kernel.eval(tmp.data(), z_mid.data(), k3.data());
      for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] + dt * k3[i];
      kernel.eval(tmp.data(), z_hi.data(), k4.data());
      for (std::size_t i = 0; i < n; ++i) x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
      sys.group().reduce_in_place(x.data());
      z_lo = z_hi;
      const double local = s + 1 == ns ? piece.duration : double(s + 1) * dt;
      tr.times.push_back(s + 1 == ns ? t0 + piece.duration : t0 + local);
      tr.points.push_back({torus_reduce(h_start + local * vel), x});
    }
    h = tr.points.back().h;
    t0 += piece.duration;
  }
  return tr;
}

/// Result of splitting a system with compact central part as G0 x g^{+,-}.
struct DecomposableSplit {
  NilGroup group;                         // the original G
  SemidirectSpec spec;
  Matrix pm_basis;                        // columns span g+ (+) g- inside u
  std::vector<std::size_t> torus_axes;    // lattice axes of u spanning g0
  Matrix split;                           // [pm_basis | e_torus]
  Matrix split_inverse;

  /// psi(h, X) = exp(X) h in coordinates of G.
  GroupPoint psi(const SemidirectPoint& p) const {
    Vector v(split.cols());
    v << p.x, p.h;
    return group.reduce(split * v);
  }

  /// Inverse of psi.
  SemidirectPoint psi_inverse(const GroupPoint& x) const {
    const Vector v = split_inverse * x.coords;
    const auto p = pm_basis.cols();
    return {torus_reduce(v.tail(v.size() - p)), v.head(p)};
  }
};

/// Residual of g^{+,-} being a subalgebra: largest coefficient of [w_a, w_b] along the central part.
inline double pm_subalgebra_residual(const LieAlgebra& alg, const Matrix& pm, const Matrix& zero) {
  if (pm.cols() == 0) return 0.0;
  const Matrix full = linalg::hcat(pm, zero);
  const Matrix inv = full.inverse();
  double res = 0.0;
  for (Eigen::Index a = 0; a < pm.cols(); ++a) {
    for (Eigen::Index b = a + 1; b < pm.cols(); ++b) {
      const Vector coef = inv * alg.bracket(pm.col(a), pm.col(b));
      if (zero.cols() > 0) res = std::max(res, coef.tail(zero.cols()).cwiseAbs().maxCoeff());
    }
  }
  return res;
}

/// Splits G = G0 x g^{+,-} when g^{+,-} is a subalgebra and g0 is the span of lattice axes
/// (a central torus). The action of G0 on g^{+,-} is then trivial.
inline DecomposableSplit build_from_decomposable(const LinearSystem& sys) {
  const NilGroup& g = sys.group();
  const LieAlgebra& alg = g.algebra();
  const auto n = sys.n();
  const SpectralDecomposition dec = spectral_decompose(alg, sys.derivation());
  const Matrix pm = linalg::hcat(dec.plus, dec.minus);

  const double sub = pm_subalgebra_residual(alg, pm, dec.zero);
  if (!(sub < kSubalgebraTolerance)) {
    throw NotApplicable("g+ (+) g- is not a subalgebra (bracket leaves it by " + std::to_string(sub) + ")");
  }
  std::vector<std::size_t> axes;
  for (auto j : g.lattice()) {
    if (linalg::distance_to_span(Vector::Unit(n, static_cast<Eigen::Index>(j)), dec.zero) < 1e-9) axes.push_back(j);
  }
  if (static_cast<Eigen::Index>(axes.size()) != dec.zero.cols()) {
    throw Unsupported("central subalgebra is not covered by lattice directions; G0 is not a torus");
  }
  Matrix torus(n, static_cast<Eigen::Index>(axes.size()));
  for (std::size_t c = 0; c < axes.size(); ++c) torus.col(static_cast<Eigen::Index>(c)) = Vector::Unit(n, static_cast<Eigen::Index>(axes[c]));
  const Matrix full = linalg::hcat(pm, torus);
  const Matrix inv = full.inverse();
  const Eigen::Index p = pm.cols();
  const Matrix pm_coords = inv.topRows(p);

  std::vector<Matrix> structure(static_cast<std::size_t>(p), Matrix::Zero(p, p));
  for (Eigen::Index a = 0; a < p; ++a) {
    for (Eigen::Index b = 0; b < p; ++b) {
      const Vector c = pm_coords * alg.bracket(pm.col(a), pm.col(b));
      for (Eigen::Index k = 0; k < p; ++k) structure[static_cast<std::size_t>(k)](a, b) = c(k);
    }
  }
  std::vector<std::string> labels;
  for (Eigen::Index a = 0; a < p; ++a) labels.push_back("w" + std::to_string(a + 1));
  // Snap roundoff so exact zeros stay exact.
  for (auto& m : structure) m = m.unaryExpr([](double v) { return std::abs(v) < 1e-13 ? 0.0 : v; });
  LieAlgebra sub_alg(std::move(structure), labels);
  Matrix d_pm = pm_coords * sys.drift() * pm;
  d_pm = d_pm.unaryExpr([](double v) { return std::abs(v) < 1e-13 ? 0.0 : v; });

  std::vector<Vector> nil_controls, torus_controls;
  for (const auto& z : sys.controls()) {
    const Vector c = inv * z;
    nil_controls.push_back(c.head(p));
    torus_controls.push_back(c.tail(c.size() - p));
  }
  const std::size_t d = axes.size();
  LinearSystem fiber(NilGroup(std::move(sub_alg)), d_pm, nil_controls, sys.omega(), {true});
  SemidirectSpec spec(d, std::vector<Matrix>(d, Matrix::Zero(p, p)), std::move(fiber), torus_controls);
  return DecomposableSplit{g, std::move(spec), pm, axes, full, inv};
}

/// Block form of a derivation in the basis adapted to the lower central series.
struct TriangularForm {
  const NilGroup* group = nullptr;
  Matrix basis;               // adapted basis T, orthogonal
  Matrix drift_adapted;       // T^T D T
  std::vector<Eigen::Index> offsets;
  double upper_residual = 0.0;  // largest entry of blocks D_ij, j > i

  std::size_t blocks() const { return offsets.size() - 1; }
  Eigen::Index block_size(std::size_t i) const { return offsets[i + 1] - offsets[i]; }

  /// D_ij: V_j -> V_i.
  Matrix block(std::size_t i, std::size_t j) const {
    return drift_adapted.block(offsets[i], offsets[j], block_size(i), block_size(j));
  }

  /// Blocks put back together, mapped to the original basis.
  Matrix reassemble() const {
    Matrix m = Matrix::Zero(drift_adapted.rows(), drift_adapted.cols());
    for (std::size_t i = 0; i < blocks(); ++i) {
      for (std::size_t j = 0; j < blocks(); ++j) m.block(offsets[i], offsets[j], block_size(i), block_size(j)) = block(i, j);
    }
    return basis * m * basis.transpose();
  }

  /// G^i(x^1..x^{i-1}; Z) = sum_{j<i} D_ij x^j + (Z(x))^i. y and z are in adapted coordinates;
  /// components of y from block i on are ignored.
  Vector g_component(std::size_t i, const Vector& y, const Vector& z_adapted) const {
    Vector lower = Vector::Zero(y.size());
    lower.head(offsets[i]) = y.head(offsets[i]);
    const Vector zx = basis.transpose() * invariant_field_eval(*group, basis * z_adapted, {basis * lower});
    Vector out = zx.segment(offsets[i], block_size(i));
    for (std::size_t j = 0; j < i; ++j) out += block(i, j) * y.segment(offsets[j], block_size(j));
    return out;
  }
};

inline constexpr double kUpperBlockTolerance = 1e-10;

inline TriangularForm triangular_form(const NilGroup& group, const Matrix& drift) {
  linalg::require_square(drift, group.n(), "drift");
  const Gradation& gr = group.gradation();
  TriangularForm tf;
  tf.group = &group;
  tf.basis = gr.adapted_basis;
  tf.drift_adapted = gr.adapted_basis.transpose() * drift * gr.adapted_basis;
  tf.offsets = gr.offsets;
  for (std::size_t i = 0; i < tf.blocks(); ++i) {
    for (std::size_t j = i + 1; j < tf.blocks(); ++j) tf.upper_residual = std::max(tf.upper_residual, linalg::max_abs(tf.block(i, j)));
  }
  if (!(tf.upper_residual < kUpperBlockTolerance * std::max(1.0, linalg::max_abs(drift)))) {
    throw InputError("drift is not block lower-triangular in the adapted basis (residual " +
                     std::to_string(tf.upper_residual) + "); not a derivation?");
  }
  return tf;
}

inline TriangularForm triangular_form(const LinearSystem& sys) { return triangular_form(sys.group(), sys.drift()); }

struct BlockCheck {
  bool ok = false;
  double zero_residual = 0.0;        // largest entry of B^p_ij with i < p + j
  double dependency_residual = 0.0;  // largest change of B^p_ij under perturbation of x^l, l > i - j - p + 1
};

/// B^p(x) = ad(x)^p in adapted blocks. Checks the zero pattern and that block (i, j) only
/// depends on x^1 .. x^{i-j-p+1} (1-based blocks).
inline BlockCheck block_structure_check(const TriangularForm& tf, const Vector& x, int p) {
  if (p < 1) throw InputError("block_structure_check needs p >= 1");
  const LieAlgebra& alg = tf.group->algebra();
  linalg::require_size(x, alg.n(), "block check point");
  const auto k = static_cast<int>(tf.blocks());
  auto bp = [&](const Vector& v) {
    const Matrix ad = alg.ad(v);
    Matrix m = Matrix::Identity(alg.n(), alg.n());
    for (int r = 0; r < p; ++r) m = ad * m;
    return Matrix(tf.basis.transpose() * m * tf.basis);
  };
  auto blk = [&](const Matrix& m, int i, int j) {
    return m.block(tf.offsets[i], tf.offsets[j], tf.block_size(i), tf.block_size(j));
  };
  const Matrix base = bp(x);
  const double scale = std::max(1.0, linalg::max_abs(base));
  BlockCheck out;
  const Vector y = tf.basis.transpose() * x;
  // 0-based blocks: (i, j) may be nonzero when i >= p + j, depending on blocks 0 .. i - j - p.
  for (int cut = 0; cut < k; ++cut) {
    Vector yp = y;
    for (Eigen::Index c = tf.offsets[cut + 1]; c < yp.size(); ++c) yp(c) += 0.37 + 0.11 * double(c);
    const Matrix pert = bp(tf.basis * yp);
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        if (i < p + j) {
          if (cut == 0) out.zero_residual = std::max(out.zero_residual, linalg::max_abs(blk(base, i, j)));
        } else if (cut >= i - j - p) {
          out.dependency_residual = std::max(out.dependency_residual, linalg::max_abs(blk(base, i, j) - blk(pert, i, j)));
        }
      }
    }
  }
  out.ok = out.zero_residual < 1e-10 * scale && out.dependency_residual < 1e-10 * scale;
  return out;
}

/// One smooth stretch of a Z path: generator z(s) for local time s in [0, duration].
struct ZSegment {
  double duration = 0.0;
  std::function<Vector(double)> z;
};

/// Z path of a control law on a linear system: z constant on each piece.
inline std::vector<ZSegment> z_path(const LinearSystem& sys, const ControlLaw& law) {
  std::vector<ZSegment> out;
  for (const auto& p : law.pieces()) {
    Vector z = sys.control_vector(p.value);
    out.push_back({p.duration, [z](double) { return z; }});
  }
  return out;
}

struct CoordinateTrajectory {
  std::vector<double> times;
  std::vector<Vector> points;  // original coordinates, lattice-reduced
};

/// Cascade solution of x' = D x + Z_t(x) block by block:
///   x^i(t) = e^{t D_ii} x^i_0 + int_0^t e^{(t-s) D_ii} G^i(x^1_s, .., x^{i-1}_s; Z_s) ds.
/// Nodes are those of simulate() (each segment cut into substeps(duration, step) equal steps);
/// the integral is advanced step by step with fourth-order weights from cubic interpolation
/// of s -> e^{(t_{m+1}-s) D_ii} G^i(s) through four nodes of the same segment.
inline CoordinateTrajectory triangular_solve(const TriangularForm& tf, const Vector& x0, const std::vector<ZSegment>& path,
                                             double step = kDefaultStep) {
  if (!(step > 0.0)) throw InputError("quadrature step must be positive");
  const NilGroup& g = *tf.group;
  linalg::require_size(x0, g.n(), "initial state");
  struct Node {
    std::size_t seg;
    double local;
  };
  // Segment-local node lists; boundary times appear once per adjacent segment.
  std::vector<std::vector<Node>> seg_nodes;
  std::vector<double> times{0.0};
  double t0 = 0.0;
  for (std::size_t s = 0; s < path.size(); ++s) {
    const std::size_t ns = substeps(path[s].duration, step);
    const double h = path[s].duration / double(ns);
    std::vector<Node> nodes;
    for (std::size_t q = 0; q <= ns; ++q) nodes.push_back({s, q == ns ? path[s].duration : double(q) * h});
    for (std::size_t q = 1; q <= ns; ++q) times.push_back(q == ns ? t0 + path[s].duration : t0 + double(q) * h);
    seg_nodes.push_back(std::move(nodes));
    t0 += path[s].duration;
  }
  const std::size_t total = times.size();
  const auto n = g.n();
  std::vector<Vector> y(total, Vector::Zero(n));
  y[0] = tf.basis.transpose() * x0;
  // Per segment, adapted Z at each node.
  std::vector<std::vector<Vector>> zs(path.size());
  for (std::size_t s = 0; s < path.size(); ++s) {
    for (const auto& nd : seg_nodes[s]) zs[s].push_back(tf.basis.transpose() * path[s].z(nd.local));
  }
  for (std::size_t i = 0; i < tf.blocks(); ++i) {
    const Eigen::Index off = tf.offsets[i], bs = tf.block_size(i);
    const Matrix dii = tf.block(i, i);
    Vector xi = y[0].segment(off, bs);
    std::size_t global = 0;
    for (std::size_t s = 0; s < path.size(); ++s) {
      const std::size_t ns = seg_nodes[s].size() - 1;
      const double h = path[s].duration / double(ns);
      std::vector<Vector> gv(ns + 1);
      for (std::size_t q = 0; q <= ns; ++q) gv[q] = tf.g_component(i, y[global + q], zs[s][q]);
      const Matrix e1 = linalg::expm(h * dii);
      const Matrix e2 = e1 * e1;
      const Matrix em1 = linalg::expm(-h * dii);
      const Matrix em2 = em1 * em1;
      // f(r) = e^{(t_{m+1} - t_r) D_ii} G(t_r); props[shift + 2] for shift = m + 1 - r in -2..3.
      const Matrix props[6] = {em2, em1, Matrix::Identity(bs, bs), e1, e2, e2 * e1};
      for (std::size_t m = 0; m < ns; ++m) {
        // Stencil of four nodes inside this segment covering [m, m+1].
        std::size_t first;
        double w[4];
        if (m == 0) {
          first = 0;
          w[0] = 9; w[1] = 19; w[2] = -5; w[3] = 1;
        } else if (m + 1 == ns) {
          first = ns - 3;
          w[0] = 1; w[1] = -5; w[2] = 19; w[3] = 9;
        } else {
          first = m - 1;
          w[0] = -1; w[1] = 13; w[2] = 13; w[3] = -1;
        }
        Vector integral = Vector::Zero(bs);
        for (int r = 0; r < 4; ++r) {
          const std::size_t node = first + static_cast<std::size_t>(r);
          const int shift = static_cast<int>(m + 1) - static_cast<int>(node);
          integral += w[r] * (props[shift + 2] * gv[node]);
        }
        xi = e1 * xi + (h / 24.0) * integral;
        y[global + m + 1].segment(off, bs) = xi;
      }
      global += ns;
    }
  }
  CoordinateTrajectory out;
  out.times = std::move(times);
  for (const auto& v : y) out.points.push_back(g.reduce(tf.basis * v).coords);
  return out;
}

inline CoordinateTrajectory triangular_solve(const LinearSystem& sys, const Vector& x0, const ControlLaw& law,
                                             double step = kDefaultStep) {
  return triangular_solve(triangular_form(sys), x0, z_path(sys, law), step);
}

}  // namespace liectl
