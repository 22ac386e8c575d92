#pragma once

#include "liectl/nilgroup.hpp"

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace liectl {

/// Axis-aligned box of admissible control values.
class ControlBox {
 public:
  ControlBox() = default;
  explicit ControlBox(std::vector<std::pair<double, double>> bounds) : bounds_(std::move(bounds)) {
    for (const auto& [lo, hi] : bounds_) {
      if (!(lo <= hi)) throw InputError("control box bound with lo > hi");
    }
  }

  std::size_t dim() const { return bounds_.size(); }
  const std::vector<std::pair<double, double>>& bounds() const { return bounds_; }

  bool contains(const Vector& u, double tol = 1e-12) const {
    if (static_cast<std::size_t>(u.size()) != dim()) return false;
    for (std::size_t j = 0; j < dim(); ++j) {
      const auto i = static_cast<Eigen::Index>(j);
      if (u(i) < bounds_[j].first - tol || u(i) > bounds_[j].second + tol) return false;
    }
    return true;
  }

  bool zero_in_interior() const {
    for (const auto& [lo, hi] : bounds_) {
      if (!(lo < 0.0 && 0.0 < hi)) return false;
    }
    return true;
  }

  /// All 2^m corners, in binary order over the control index.
  std::vector<Vector> vertices() const {
    std::vector<Vector> out;
    const std::size_t count = std::size_t{1} << dim();
    for (std::size_t mask = 0; mask < count; ++mask) {
      Vector v(static_cast<Eigen::Index>(dim()));
      for (std::size_t j = 0; j < dim(); ++j) {
        v(static_cast<Eigen::Index>(j)) = (mask >> j) & 1U ? bounds_[j].second : bounds_[j].first;
      }
      out.push_back(std::move(v));
    }
    return out;
  }

 private:
  std::vector<std::pair<double, double>> bounds_;
};

struct Piece {
  double duration = 0.0;
  Vector value;
};

/// Piecewise-constant control on [0, duration()).
class ControlLaw {
 public:
  ControlLaw() = default;
  explicit ControlLaw(std::vector<Piece> pieces) : pieces_(std::move(pieces)) {
    for (const auto& p : pieces_) {
      if (!(p.duration > 0.0)) throw InputError("control piece duration must be positive");
    }
  }

  static ControlLaw constant(const Vector& value, double duration) { return ControlLaw({{duration, value}}); }

  const std::vector<Piece>& pieces() const { return pieces_; }
  bool empty() const { return pieces_.empty(); }

  double duration() const {
    double t = 0.0;
    for (const auto& p : pieces_) t += p.duration;
    return t;
  }

  /// Value on the piece containing t (right-continuous); the last value past the end.
  const Vector& value_at(double t) const {
    if (pieces_.empty()) throw InputError("value_at on an empty control law");
    double acc = 0.0;
    for (const auto& p : pieces_) {
      acc += p.duration;
      if (t < acc) return p.value;
    }
    return pieces_.back().value;
  }

  /// Restriction to [0, tau).
  ControlLaw truncated(double tau) const {
    std::vector<Piece> out;
    double acc = 0.0;
    for (const auto& p : pieces_) {
      if (acc >= tau) break;
      const double d = std::min(p.duration, tau - acc);
      if (d > 0.0) out.push_back({d, p.value});
      acc += p.duration;
    }
    return ControlLaw(std::move(out));
  }

  /// The shifted law t -> u(t + tau), restricted to what remains of the horizon.
  ControlLaw shifted(double tau) const {
    std::vector<Piece> out;
    double acc = 0.0;
    for (const auto& p : pieces_) {
      const double end = acc + p.duration;
      if (end > tau) {
        const double d = end - std::max(acc, tau);
        if (d > 0.0) out.push_back({d, p.value});
      }
      acc = end;
    }
    return ControlLaw(std::move(out));
  }

  /// Time-reversed law t -> u(T - t).
  ControlLaw reversed() const { return ControlLaw(std::vector<Piece>(pieces_.rbegin(), pieces_.rend())); }

  void append(const ControlLaw& other) { pieces_.insert(pieces_.end(), other.pieces_.begin(), other.pieces_.end()); }

 private:
  std::vector<Piece> pieces_;
};

/// Law equal to law1 on [0, tau1) followed by law2.
inline ControlLaw concatenate_laws(const ControlLaw& law1, double tau1, const ControlLaw& law2) {
  if (tau1 < 0.0 || tau1 > law1.duration() * (1.0 + 1e-12) + 1e-15) {
    throw InputError("concatenate_laws: split time exceeds the first law");
  }
  ControlLaw out = law1.truncated(tau1);
  out.append(law2);
  return out;
}

struct SystemOptions {
  /// Permit a control box without 0 in its interior (u == 0 only, for degenerate experiments).
  bool allow_degenerate_omega = false;
};

enum class Direction { Forward, Backward };

/// Linear control system x' = D x + sum_j u_j Z_j(x) on a nilpotent group.
class LinearSystem {
 public:
  LinearSystem(NilGroup group, const Matrix& drift, std::vector<Vector> controls, ControlBox omega,
               SystemOptions opts = {})
      : group_(std::move(group)),
        drift_(group_.algebra(), drift),
        controls_(std::move(controls)),
        omega_(std::move(omega)) {
    for (const auto& z : controls_) linalg::require_size(z, group_.n(), "control vector");
    if (omega_.dim() != controls_.size()) {
      throw InputError("control box dimension " + std::to_string(omega_.dim()) + " does not match " +
                       std::to_string(controls_.size()) + " control vectors");
    }
    if (!opts.allow_degenerate_omega && !omega_.zero_in_interior()) {
      throw InputError("control range must contain 0 in its interior");
    }
    for (auto j : group_.lattice()) {
      if (drift_.matrix().col(static_cast<Eigen::Index>(j)).cwiseAbs().maxCoeff() > 1e-12) {
        throw InputError("drift must vanish on lattice direction e" + std::to_string(j + 1));
      }
    }
  }

  const NilGroup& group() const { return group_; }
  const Matrix& drift() const { return drift_.matrix(); }
  const Derivation& derivation() const { return drift_; }
  const std::vector<Vector>& controls() const { return controls_; }
  const ControlBox& omega() const { return omega_; }
  std::size_t m() const { return controls_.size(); }
  Eigen::Index n() const { return group_.n(); }

  /// sum_j u_j Z_j.
  Vector control_vector(const Vector& u) const {
    Vector z = Vector::Zero(n());
    for (std::size_t j = 0; j < controls_.size(); ++j) z += u(static_cast<Eigen::Index>(j)) * controls_[j];
    return z;
  }

 private:
  NilGroup group_;
  Derivation drift_;
  std::vector<Vector> controls_;
  ControlBox omega_;
};

/// Allocation-free evaluation of x -> D x + Z(x) and RK4 steps, for tight loops.
class FieldKernel {
 public:
  explicit FieldKernel(const LinearSystem& sys, Direction dir = Direction::Forward)
      : group_(&sys.group()), n_(static_cast<std::size_t>(sys.n())), sign_(dir == Direction::Forward ? 1.0 : -1.0) {
    drift_.resize(n_ * n_);
    for (std::size_t r = 0; r < n_; ++r) {
      for (std::size_t c = 0; c < n_; ++c) {
        drift_[r * n_ + c] = sys.drift()(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      }
    }
    coeffs_ = group_->coefficients().c;
    work_.assign(8 * n_, 0.0);
  }

  std::size_t n() const { return n_; }

  /// out = sign * (D x + sum_p c_p ad(x)^p z).
  void eval(const double* x, const double* z, double* out) {
    double* term = work_.data();
    double* next = term + n_;
    for (std::size_t i = 0; i < n_; ++i) {
      term[i] = z[i];
      out[i] = coeffs_[0] * z[i];
    }
    const auto& alg = group_->algebra();
    for (std::size_t p = 1; p < coeffs_.size(); ++p) {
      std::fill(next, next + n_, 0.0);
      alg.bracket_into(x, term, next);
      for (std::size_t i = 0; i < n_; ++i) out[i] += coeffs_[p] * next[i];
      std::swap(term, next);
    }
    for (std::size_t r = 0; r < n_; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < n_; ++c) s += drift_[r * n_ + c] * x[c];
      out[r] = sign_ * (out[r] + s);
    }
  }

  /// One classical RK4 step of size h with constant generator z; x updated in place and lattice-reduced.
  void rk4_step(double* x, const double* z, double h) {
    double* k1 = work_.data() + 2 * n_;
    double* k2 = k1 + n_;
    double* k3 = k2 + n_;
    double* k4 = k3 + n_;
    double* tmp = k4 + n_;
    eval(x, z, k1);
    for (std::size_t i = 0; i < n_; ++i) tmp[i] = x[i] + 0.5 * h * k1[i];
    eval(tmp, z, k2);
    for (std::size_t i = 0; i < n_; ++i) tmp[i] = x[i] + 0.5 * h * k2[i];
    eval(tmp, z, k3);
    for (std::size_t i = 0; i < n_; ++i) tmp[i] = x[i] + h * k3[i];
    eval(tmp, z, k4);
    for (std::size_t i = 0; i < n_; ++i) x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    group_->reduce_in_place(x);
  }

 private:
  const NilGroup* group_;
  std::size_t n_;
  double sign_;
  std::vector<double> drift_;
  std::vector<double> coeffs_;
  std::vector<double> work_;
};

/// Number of equal sub-steps used for a piece of the given duration.
inline constexpr double kDefaultStep = 1e-3;

inline std::size_t substeps(double duration, double step, std::size_t min_steps = 3) {
  const auto s = static_cast<std::size_t>(std::ceil(duration / step - 1e-9));
  return std::max(min_steps, std::max<std::size_t>(s, 1));
}

/// D x + sum_j u_j Z_j(x).
inline Vector vector_field(const LinearSystem& sys, const GroupPoint& x, const Vector& u) {
  linalg::require_size(x.coords, sys.n(), "state");
  if (!sys.omega().contains(u)) throw InputError("control value outside the control range");
  return sys.drift() * x.coords + invariant_field_eval(sys.group(), sys.control_vector(u), x);
}

/// Flow of the drift, e^{tD} acting as a group automorphism.
inline GroupPoint drift_flow(const LinearSystem& sys, double t, const GroupPoint& x) {
  return automorphism_apply(sys.group(), linalg::expm(t * sys.drift()), x);
}

struct Trajectory {
  std::vector<double> times;
  std::vector<Vector> points;
  ControlLaw law;
  Vector start;

  const Vector& end() const { return points.back(); }
};

/// Fixed-step RK4 solution; each piece is split into equal sub-steps of size <= step so no
/// step crosses a control discontinuity. Backward integrates the time-reversed field.
inline Trajectory simulate(const LinearSystem& sys, const GroupPoint& x0, const ControlLaw& law, double step = kDefaultStep,
                           Direction dir = Direction::Forward) {
  if (!(step > 0.0)) throw InputError("integration step must be positive");
  linalg::require_size(x0.coords, sys.n(), "initial state");
  for (const auto& p : law.pieces()) {
    if (!sys.omega().contains(p.value)) throw InputError("control value outside the control range");
  }
  FieldKernel kernel(sys, dir);
  Trajectory tr;
  tr.law = law;
  tr.start = sys.group().reduce(x0.coords).coords;
  Vector x = tr.start;
  tr.times.push_back(0.0);
  tr.points.push_back(x);
  double t0 = 0.0;
  for (const auto& p : law.pieces()) {
    const Vector z = sys.control_vector(p.value);
    const std::size_t ns = substeps(p.duration, step);
    const double h = p.duration / double(ns);
    for (std::size_t s = 1; s <= ns; ++s) {
      kernel.rk4_step(x.data(), z.data(), h);
      tr.times.push_back(s == ns ? t0 + p.duration : t0 + double(s) * h);
      tr.points.push_back(x);
    }
    t0 += p.duration;
  }
  return tr;
}

/// Residual of the equivariance phi(t, x0 * g, u) = phi(t, x0, u) * phi_t(g), maximised
/// over the sample grid. Right translation is the symmetry of systems whose control
/// fields are the series (Z)(x) = sum c_p ad(x)^p Z.
inline double check_flow_property(const LinearSystem& sys, const GroupPoint& g, const GroupPoint& x0,
                                  const ControlLaw& law, double step) {
  const NilGroup& grp = sys.group();
  const Trajectory lhs = simulate(sys, grp.product(x0, g), law, step);
  const Trajectory rhs = simulate(sys, x0, law, step);
  double res = 0.0;
  for (std::size_t m = 0; m < lhs.points.size(); ++m) {
    const GroupPoint moved = drift_flow(sys, rhs.times[m], g);
    const GroupPoint expect = grp.product({rhs.points[m]}, moved);
    res = std::max(res, grp.distance(lhs.points[m], expect.coords));
  }
  return res;
}

}  // namespace liectl
