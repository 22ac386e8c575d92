#pragma once

#include "liectl/lie_core.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace liectl {

inline constexpr int kMaxNilpotencyClass = 4;

/// Point of a nilpotent group in exponential coordinates. Lattice coordinates are kept in [0, 1).
struct GroupPoint {
  Vector coords;
};

struct BCHCoefficients {
  std::vector<double> c;
};

/// Bernoulli numbers B_0 .. B_m with the B_1 = +1/2 convention.
inline std::vector<double> bernoulli_plus(std::size_t m) {
  std::vector<double> b(m + 1, 0.0);
  b[0] = 1.0;
  // sum_{j=0}^{r} binom(r+1, j) B_j = 0 gives the B_1 = -1/2 numbers.
  for (std::size_t r = 1; r <= m; ++r) {
    double s = 0.0;
    double binom = 1.0;  // binom(r+1, 0)
    for (std::size_t j = 0; j < r; ++j) {
      s += binom * b[j];
      binom = binom * double(r + 1 - j) / double(j + 1);
    }
    b[r] = -s / double(r + 1);
  }
  if (m >= 1) b[1] = -b[1];
  return b;
}

/// c_p = (-1)^p B_p / p! for p < class_k.
inline BCHCoefficients bch_coefficients(int class_k) {
  if (class_k < 1 || class_k > kMaxNilpotencyClass) {
    throw Unsupported("BCH coefficients only for nilpotency class 1.." + std::to_string(kMaxNilpotencyClass));
  }
  const auto b = bernoulli_plus(static_cast<std::size_t>(class_k - 1));
  BCHCoefficients out;
  double fact = 1.0;
  for (int p = 0; p < class_k; ++p) {
    if (p > 0) fact *= p;
    out.c.push_back((p % 2 == 0 ? 1.0 : -1.0) * b[static_cast<std::size_t>(p)] / fact);
  }
  return out;
}

/// Simply connected nilpotent group (u, *) with the BCH product, optionally quotiented by
/// the unit lattice on a set of central basis directions.
class NilGroup {
 public:
  explicit NilGroup(LieAlgebra algebra, std::vector<std::size_t> lattice = {})
      : algebra_(std::move(algebra)), gradation_(lower_central_series(algebra_)), lattice_(std::move(lattice)) {
    if (gradation_.class_k > kMaxNilpotencyClass) {
      throw Unsupported("nilpotency class " + std::to_string(gradation_.class_k) + " exceeds supported maximum " +
                        std::to_string(kMaxNilpotencyClass));
    }
    std::sort(lattice_.begin(), lattice_.end());
    lattice_.erase(std::unique(lattice_.begin(), lattice_.end()), lattice_.end());
    is_lattice_.assign(algebra_.dim(), false);
    for (auto j : lattice_) {
      if (j >= algebra_.dim()) throw InputError("lattice index out of range");
      if (!algebra_.is_central(j)) {
        throw InputError("lattice direction e" + std::to_string(j + 1) + " is not central");
      }
      is_lattice_[j] = true;
    }
    coeffs_ = bch_coefficients(gradation_.class_k);
  }

  const LieAlgebra& algebra() const { return algebra_; }
  const Gradation& gradation() const { return gradation_; }
  int class_k() const { return gradation_.class_k; }
  std::size_t dim() const { return algebra_.dim(); }
  Eigen::Index n() const { return algebra_.n(); }
  const std::vector<std::size_t>& lattice() const { return lattice_; }
  bool is_lattice(std::size_t i) const { return is_lattice_[i]; }
  bool has_lattice() const { return !lattice_.empty(); }
  const BCHCoefficients& coefficients() const { return coeffs_; }

  GroupPoint identity() const { return {Vector::Zero(n())}; }

  /// Canonical representative: lattice coordinates reduced into [0, 1).
  GroupPoint reduce(Vector coords) const {
    linalg::require_size(coords, n(), "group point");
    reduce_in_place(coords.data());
    return {std::move(coords)};
  }

  void reduce_in_place(double* x) const {
    for (auto j : lattice_) {
      double v = x[j] - std::floor(x[j]);
      if (v >= 1.0) v = 0.0;  // x[j] = -tiny rounds up to 1
      x[j] = v;
    }
  }

  GroupPoint point(const Vector& coords) const { return reduce(coords); }

  /// x * y via the BCH series truncated after brackets of four elements; exact for class <= 4.
  GroupPoint product(const GroupPoint& x, const GroupPoint& y) const {
    return reduce(bch(x.coords, y.coords));
  }

  /// Unreduced BCH value c(X, Y).
  Vector bch(const Vector& x, const Vector& y) const {
    linalg::require_size(x, n(), "bch lhs");
    linalg::require_size(y, n(), "bch rhs");
    const LieAlgebra& a = algebra_;
    Vector out = x + y;
    const int k = class_k();
    if (k < 2) return out;
    const Vector xy = a.bracket(x, y);
    out += 0.5 * xy;
    if (k < 3) return out;
    const Vector x_xy = a.bracket(x, xy);
    const Vector y_xy = a.bracket(y, xy);
    out += (x_xy - y_xy) / 12.0;
    if (k < 4) return out;
    out -= a.bracket(y, x_xy) / 24.0;
    return out;
  }

  GroupPoint inverse(const GroupPoint& x) const { return reduce(-x.coords); }

  /// Sup-norm distance with circle distance on lattice coordinates.
  double distance(const Vector& a, const Vector& b) const {
    double d = 0.0;
    for (Eigen::Index i = 0; i < n(); ++i) {
      double diff = std::abs(a(i) - b(i));
      if (is_lattice_[static_cast<std::size_t>(i)]) {
        diff = std::fmod(diff, 1.0);
        diff = std::min(diff, 1.0 - diff);
      }
      d = std::max(d, diff);
    }
    return d;
  }
  double distance(const GroupPoint& a, const GroupPoint& b) const { return distance(a.coords, b.coords); }

  /// Largest |coordinate| over non-lattice directions.
  double noncentral_norm(const Vector& x) const {
    double m = 0.0;
    for (Eigen::Index i = 0; i < n(); ++i) {
      if (!is_lattice_[static_cast<std::size_t>(i)]) m = std::max(m, std::abs(x(i)));
    }
    return m;
  }

 private:
  LieAlgebra algebra_;
  Gradation gradation_;
  std::vector<std::size_t> lattice_;
  std::vector<bool> is_lattice_;
  BCHCoefficients coeffs_;
};

/// (rho Z)(x) with rho trivial: sum_{p<k} c_p ad(x)^p Z, the invariant field generated by Z
/// evaluated at x. It is d/ds|0 of (sZ) * x.
inline Vector invariant_field_eval(const NilGroup& g, const Vector& z, const GroupPoint& x) {
  linalg::require_size(z, g.n(), "invariant field generator");
  linalg::require_size(x.coords, g.n(), "invariant field point");
  const auto& c = g.coefficients().c;
  Vector term = z;
  Vector out = c[0] * z;
  for (std::size_t p = 1; p < c.size(); ++p) {
    term = g.algebra().bracket(x.coords, term);
    out += c[p] * term;
  }
  return out;
}

/// max |A[e_i,e_j] - [Ae_i, Ae_j]| over basis pairs.
inline double automorphism_residual(const LieAlgebra& alg, const Matrix& a) {
  linalg::require_square(a, alg.n(), "automorphism");
  double res = 0.0;
  const auto n = alg.n();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const Vector lhs = a * alg.bracket(Vector::Unit(n, i), Vector::Unit(n, j));
      const Vector rhs = alg.bracket(a.col(i), a.col(j));
      res = std::max(res, (lhs - rhs).cwiseAbs().maxCoeff());
    }
  }
  return res;
}

/// Applies an algebra automorphism in exponential coordinates (the induced group automorphism).
/// On a quotient the map must send each lattice axis to an integer combination of lattice axes.
inline GroupPoint automorphism_apply(const NilGroup& g, const Matrix& a, const GroupPoint& x) {
  const double res = automorphism_residual(g.algebra(), a);
  if (!(res < 1e-8)) {
    throw InputError("not an algebra automorphism (residual " + std::to_string(res) + ")");
  }
  for (auto j : g.lattice()) {
    const auto col = a.col(static_cast<Eigen::Index>(j));
    for (Eigen::Index r = 0; r < g.n(); ++r) {
      const double v = col(r);
      const bool ok = g.is_lattice(static_cast<std::size_t>(r)) ? std::abs(v - std::round(v)) < 1e-8
                                                                 : std::abs(v) < 1e-8;
      if (!ok) throw InputError("automorphism does not preserve the lattice");
    }
  }
  return g.reduce(a * x.coords);
}

}  // namespace liectl
