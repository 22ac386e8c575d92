#pragma once

#include "liectl/linalg.hpp"

#include <algorithm>
#include <complex>
#include <limits>
#include <cstddef>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace liectl {

/// One nonzero structure constant: [e_i, e_j] contains coeff * e_k (0-based indices).
struct BracketEntry {
  std::size_t i = 0;
  std::size_t j = 0;
  std::size_t k = 0;
  double coeff = 0.0;
};

/// Finite-dimensional real Lie algebra given by structure constants over a fixed basis.
///
/// `structure(k)(i, j)` is the coefficient of e_k in [e_i, e_j]. The algebra does not
/// enforce antisymmetry or the Jacobi identity on construction; `validate_algebra`
/// reports both. Use `from_brackets` for the usual antisymmetric completion.
class LieAlgebra {
 public:
  LieAlgebra(std::vector<Matrix> structure, std::vector<std::string> labels = {})
      : structure_(std::move(structure)), labels_(std::move(labels)) {
    const auto n = static_cast<Eigen::Index>(structure_.size());
    if (n == 0) throw InputError("LieAlgebra: dimension must be positive");
    for (const auto& c : structure_) linalg::require_square(c, n, "LieAlgebra structure slice");
    if (labels_.empty()) {
      for (Eigen::Index i = 0; i < n; ++i) labels_.push_back("e" + std::to_string(i + 1));
    }
    if (static_cast<Eigen::Index>(labels_.size()) != n) {
      throw InputError("LieAlgebra: need one label per basis vector");
    }
    for (Eigen::Index k = 0; k < n; ++k) {
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
          const double c = structure_[k](i, j);
          if (c != 0.0) sparse_.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j),
                                           static_cast<std::size_t>(k), c});
        }
      }
    }
  }

  /// Builds the algebra from listed brackets, filling in [e_j, e_i] = -[e_i, e_j].
  static LieAlgebra from_brackets(std::size_t dim, const std::vector<BracketEntry>& entries,
                                  std::vector<std::string> labels = {}) {
    if (dim == 0) throw InputError("LieAlgebra: dimension must be positive");
    const auto n = static_cast<Eigen::Index>(dim);
    std::vector<Matrix> c(dim, Matrix::Zero(n, n));
    for (const auto& e : entries) {
      if (e.i >= dim || e.j >= dim || e.k >= dim) {
        throw InputError("bracket entry index out of range");
      }
      if (e.i == e.j) {
        if (e.coeff != 0.0) throw InputError("bracket [e_i, e_i] must vanish");
        continue;
      }
      const auto i = static_cast<Eigen::Index>(e.i);
      const auto j = static_cast<Eigen::Index>(e.j);
      auto& slice = c[e.k];
      const bool set_ij = slice(i, j) != 0.0;
      const bool set_ji = slice(j, i) != 0.0;
      if ((set_ij && slice(i, j) != e.coeff) || (set_ji && slice(j, i) != -e.coeff)) {
        throw InputError("conflicting bracket entries for [e" + std::to_string(e.i + 1) + ", e" +
                         std::to_string(e.j + 1) + "]");
      }
      slice(i, j) = e.coeff;
      slice(j, i) = -e.coeff;
    }
    return LieAlgebra(std::move(c), std::move(labels));
  }

  std::size_t dim() const { return structure_.size(); }
  Eigen::Index n() const { return static_cast<Eigen::Index>(structure_.size()); }
  const Matrix& structure(std::size_t k) const { return structure_[k]; }
  double constant(std::size_t k, std::size_t i, std::size_t j) const {
    return structure_[k](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  const std::vector<std::string>& labels() const { return labels_; }
  /// Nonzero structure constants, for tight loops.
  const std::vector<BracketEntry>& sparse() const { return sparse_; }

  Vector bracket(const Vector& x, const Vector& y) const {
    linalg::require_size(x, n(), "bracket lhs");
    linalg::require_size(y, n(), "bracket rhs");
    Vector out = Vector::Zero(n());
    bracket_into(x.data(), y.data(), out.data());
    return out;
  }

  /// out += [x, y]; no size checks.
  void bracket_into(const double* x, const double* y, double* out) const {
    for (const auto& e : sparse_) out[e.k] += e.coeff * x[e.i] * y[e.j];
  }

  /// Matrix of ad(x) = [x, .] in the given basis.
  Matrix ad(const Vector& x) const {
    linalg::require_size(x, n(), "ad argument");
    Matrix a = Matrix::Zero(n(), n());
    for (const auto& e : sparse_) {
      a(static_cast<Eigen::Index>(e.k), static_cast<Eigen::Index>(e.j)) += e.coeff * x(static_cast<Eigen::Index>(e.i));
    }
    return a;
  }

  Vector basis_vector(std::size_t i) const { return Vector::Unit(n(), static_cast<Eigen::Index>(i)); }

  /// e_j is central when every structure constant with j as an argument vanishes.
  bool is_central(std::size_t j) const {
    return std::none_of(sparse_.begin(), sparse_.end(),
                        [j](const BracketEntry& e) { return e.i == j || e.j == j; });
  }

 private:
  std::vector<Matrix> structure_;
  std::vector<std::string> labels_;
  std::vector<BracketEntry> sparse_;
};

struct AlgebraReport {
  double antisymmetry_residual = 0.0;
  double jacobi_residual = 0.0;
  static constexpr double tolerance = 1e-12;
  bool antisymmetric() const { return antisymmetry_residual < tolerance; }
  bool jacobi() const { return jacobi_residual < tolerance; }
  bool passed() const { return antisymmetric() && jacobi(); }
};

inline AlgebraReport validate_algebra(const LieAlgebra& alg) {
  AlgebraReport r;
  const auto n = alg.n();
  for (Eigen::Index k = 0; k < n; ++k) {
    const Matrix& c = alg.structure(static_cast<std::size_t>(k));
    r.antisymmetry_residual = std::max(r.antisymmetry_residual, linalg::max_abs(c + c.transpose()));
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector ei = Vector::Unit(n, i);
    for (Eigen::Index j = 0; j < n; ++j) {
      const Vector ej = Vector::Unit(n, j);
      for (Eigen::Index k = 0; k < n; ++k) {
        const Vector ek = Vector::Unit(n, k);
        const Vector jac = alg.bracket(alg.bracket(ei, ej), ek) + alg.bracket(alg.bracket(ej, ek), ei) +
                           alg.bracket(alg.bracket(ek, ei), ej);
        r.jacobi_residual = std::max(r.jacobi_residual, jac.cwiseAbs().maxCoeff());
      }
    }
  }
  return r;
}

struct DerivationCheck {
  bool ok = false;
  double residual = 0.0;
};

inline constexpr double kDerivationTolerance = 1e-9;

/// Leibniz residual max_{i,j} |D[e_i,e_j] - [De_i,e_j] - [e_i,De_j]|.
inline DerivationCheck is_derivation(const LieAlgebra& alg, const Matrix& d) {
  linalg::require_square(d, alg.n(), "derivation");
  const auto n = alg.n();
  double res = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const Vector ei = Vector::Unit(n, i);
      const Vector ej = Vector::Unit(n, j);
      const Vector lhs = d * alg.bracket(ei, ej);
      const Vector rhs = alg.bracket(d.col(i), ej) + alg.bracket(ei, d.col(j));
      res = std::max(res, (lhs - rhs).cwiseAbs().maxCoeff());
    }
  }
  return {res < kDerivationTolerance, res};
}

/// A matrix certified to satisfy the Leibniz rule on its algebra.
class Derivation {
 public:
  Derivation(const LieAlgebra& alg, Matrix d) : matrix_(std::move(d)) {
    const auto check = is_derivation(alg, matrix_);
    if (!check.ok) {
      throw InputError("matrix is not a derivation (Leibniz residual " + std::to_string(check.residual) + ")");
    }
  }
  const Matrix& matrix() const { return matrix_; }

 private:
  Matrix matrix_;
};

/// Basis of Der(alg), the solution space of the Leibniz system, as n x n matrices.
inline std::vector<Matrix> derivation_basis(const LieAlgebra& alg) {
  const auto n = alg.n();
  const Eigen::Index unknowns = n * n;  // D(r, c) -> index r * n + c
  const Eigen::Index pairs = n * (n - 1) / 2;
  Matrix sys = Matrix::Zero(std::max<Eigen::Index>(pairs * n, 1), unknowns);
  Eigen::Index row = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      for (Eigen::Index k = 0; k < n; ++k, ++row) {
        // (D [e_i, e_j])_k = sum_l D(k, l) C[l][i][j]
        for (Eigen::Index l = 0; l < n; ++l) {
          sys(row, k * n + l) += alg.structure(static_cast<std::size_t>(l))(i, j);
        }
        // ([D e_i, e_j])_k = sum_l D(l, i) C[k][l][j]
        for (Eigen::Index l = 0; l < n; ++l) {
          sys(row, l * n + i) -= alg.structure(static_cast<std::size_t>(k))(l, j);
          sys(row, l * n + j) -= alg.structure(static_cast<std::size_t>(k))(i, l);
        }
      }
    }
  }
  const Matrix kernel = linalg::null_space(sys);
  std::vector<Matrix> out;
  for (Eigen::Index c = 0; c < kernel.cols(); ++c) {
    Matrix d(n, n);
    for (Eigen::Index r = 0; r < n; ++r) {
      for (Eigen::Index s = 0; s < n; ++s) d(r, s) = kernel(r * n + s, c);
    }
    out.push_back(std::move(d));
  }
  return out;
}

/// Lower central series u^1 = u, u^{i+1} = [u^i, u] with orthogonal complements V_i.
struct Gradation {
  int class_k = 0;
  std::vector<Matrix> series;       // orthonormal bases of u^1 .. u^k
  std::vector<Matrix> complements;  // V_1 .. V_k, V_i (+) u^{i+1} = u^i
  std::vector<int> component_index; // adapted coordinate -> block (0-based)
  std::vector<Eigen::Index> offsets;  // start of block i in adapted coordinates; offsets[k] = n
  Matrix adapted_basis;             // [V_1 | ... | V_k], orthogonal

  Eigen::Index block_size(std::size_t i) const { return offsets[i + 1] - offsets[i]; }
  Vector to_adapted(const Vector& x) const { return adapted_basis.transpose() * x; }
  Vector from_adapted(const Vector& y) const { return adapted_basis * y; }
  /// x^i, the V_i-component of x in adapted coordinates.
  Vector component(const Vector& x, std::size_t i) const {
    return to_adapted(x).segment(offsets[i], block_size(i));
  }
};

inline Gradation lower_central_series(const LieAlgebra& alg) {
  const auto n = alg.n();
  Gradation g;
  Matrix current = Matrix::Identity(n, n);
  g.series.push_back(current);
  while (true) {
    Matrix spans(n, current.cols() * n);
    Eigen::Index col = 0;
    for (Eigen::Index a = 0; a < current.cols(); ++a) {
      for (Eigen::Index j = 0; j < n; ++j) spans.col(col++) = alg.bracket(current.col(a), Vector::Unit(n, j));
    }
    Matrix next = linalg::canonical_basis(linalg::orth(spans));
    if (next.cols() == 0) break;
    if (next.cols() == current.cols()) {
      throw NotNilpotent("lower central series stabilises at dimension " + std::to_string(next.cols()));
    }
    g.series.push_back(next);
    current = std::move(next);
  }
  g.class_k = static_cast<int>(g.series.size());
  g.offsets.push_back(0);
  for (std::size_t i = 0; i < g.series.size(); ++i) {
    const Matrix inner = i + 1 < g.series.size() ? g.series[i + 1] : linalg::empty_basis(n);
    Matrix v = linalg::canonical_basis(linalg::orth_complement_in(g.series[i], inner));
    g.offsets.push_back(g.offsets.back() + v.cols());
    for (Eigen::Index c = 0; c < v.cols(); ++c) g.component_index.push_back(static_cast<int>(i));
    g.complements.push_back(std::move(v));
  }
  g.adapted_basis = Matrix(n, n);
  for (std::size_t i = 0; i < g.complements.size(); ++i) {
    g.adapted_basis.middleCols(g.offsets[i], g.complements[i].cols()) = g.complements[i];
  }
  return g;
}

/// Real generalized eigenspace sum g_lambda for one clustered real part lambda.
struct SpectralLevel {
  double lambda = 0.0;
  Matrix basis;                                   // orthonormal, n x dim
  std::vector<std::complex<double>> eigenvalues;  // with multiplicity
};

struct SpectralDecomposition {
  std::vector<SpectralLevel> levels;  // sorted by increasing lambda
  Matrix plus;
  Matrix zero;
  Matrix minus;
  std::vector<std::string> warnings;

  /// [basis(level 0) | basis(level 1) | ...]; invertible.
  Matrix level_matrix() const {
    const Eigen::Index n = levels.empty() ? plus.rows() : levels.front().basis.rows();
    Eigen::Index cols = 0;
    for (const auto& l : levels) cols += l.basis.cols();
    Matrix m(n, cols);
    Eigen::Index c = 0;
    for (const auto& l : levels) {
      m.middleCols(c, l.basis.cols()) = l.basis;
      c += l.basis.cols();
    }
    return m;
  }

  /// Index of the level with real part `lambda`, or -1.
  int find_level(double lambda, double tol = 1e-7) const {
    for (std::size_t i = 0; i < levels.size(); ++i) {
      if (std::abs(levels[i].lambda - lambda) <= tol * std::max(1.0, std::abs(lambda))) return static_cast<int>(i);
    }
    return -1;
  }
};

inline constexpr double kRealPartCluster = 1e-9;

/// Splits R^n into real generalized eigenspaces of D grouped by real part.
///
/// Eigenvalues are first merged when they look like members of one perturbed Jordan block
/// (close, with nearly parallel eigenvectors), then levels are formed from
/// real parts within 1e-9 of each other; real parts within 1e-9 of zero form g^0. Each
/// level is the kernel of prod (D - alpha I) over its eigenvalues, whose dimension is the
/// algebraic multiplicity.
inline SpectralDecomposition spectral_decompose(const LieAlgebra& alg, const Derivation& der) {
  const Matrix& d = der.matrix();
  const auto n = alg.n();
  SpectralDecomposition out;
  Eigen::EigenSolver<Matrix> es(d, true);
  std::vector<std::complex<double>> ev(es.eigenvalues().data(), es.eigenvalues().data() + n);
  const Eigen::MatrixXcd evec = es.eigenvectors();

  const double scale = std::max(1.0, d.norm());
  const double defect_tol =
      std::max(kRealPartCluster, 10.0 * scale * std::pow(std::numeric_limits<double>::epsilon(), 1.0 / double(n)));

  // Defective groups: numerically close eigenvalues whose eigenvectors are nearly parallel
  // (a perturbed Jordan block), merged by single linkage.
  std::vector<int> group(ev.size());
  std::iota(group.begin(), group.end(), 0);
  auto root = [&](int a) {
    while (group[a] != a) a = group[a] = group[group[a]];
    return a;
  };
  for (std::size_t a = 0; a < ev.size(); ++a) {
    for (std::size_t b = a + 1; b < ev.size(); ++b) {
      if (std::abs(ev[a] - ev[b]) >= defect_tol) continue;
      const auto va = evec.col(static_cast<Eigen::Index>(a));
      const auto vb = evec.col(static_cast<Eigen::Index>(b));
      const double cosine = std::abs(va.dot(vb)) / (va.norm() * vb.norm());
      if (std::abs(ev[a] - ev[b]) < kRealPartCluster || cosine > 1.0 - 1e-6) group[root(int(b))] = root(int(a));
    }
  }
  struct Group {
    double re = 0.0;
    std::vector<std::complex<double>> members;
  };
  std::vector<Group> groups;
  std::vector<int> slot(ev.size(), -1);
  for (std::size_t a = 0; a < ev.size(); ++a) {
    const int r = root(int(a));
    if (slot[r] < 0) {
      slot[r] = int(groups.size());
      groups.emplace_back();
    }
    groups[slot[r]].members.push_back(ev[a]);
  }
  for (auto& g : groups) {
    double s = 0.0;
    for (auto z : g.members) s += z.real();
    g.re = s / double(g.members.size());
  }
  std::sort(groups.begin(), groups.end(), [](const Group& a, const Group& b) { return a.re < b.re; });

  // Levels: single linkage on real parts.
  std::vector<std::vector<const Group*>> clusters;
  for (const auto& g : groups) {
    if (!clusters.empty() && g.re - clusters.back().back()->re <= kRealPartCluster) {
      clusters.back().push_back(&g);
    } else {
      clusters.push_back({&g});
    }
  }
  for (const auto& cl : clusters) {
    SpectralLevel level;
    double s = 0.0;
    for (const Group* g : cl) {
      for (auto z : g->members) {
        level.eigenvalues.push_back(z);
        s += z.real();
      }
    }
    level.lambda = s / double(level.eigenvalues.size());
    if (std::abs(level.lambda) <= kRealPartCluster) level.lambda = 0.0;

    Eigen::MatrixXcd p = Eigen::MatrixXcd::Identity(n, n);
    const Eigen::MatrixXcd dc = d.cast<std::complex<double>>();
    for (auto z : level.eigenvalues) p = p * (dc - z * Eigen::MatrixXcd::Identity(n, n));
    const Matrix pr = p.real();
    const auto m = static_cast<Eigen::Index>(level.eigenvalues.size());
    Eigen::JacobiSVD<Matrix> svd(pr, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    if (m < n && sv(0) > 0.0 && sv(n - m) > 1e-10 * sv(0)) {
      out.warnings.push_back("level " + std::to_string(level.lambda) +
                             ": generalized eigenspace poorly separated (kernel singular value ratio " +
                             std::to_string(sv(n - m) / sv(0)) + ")");
    }
    level.basis = linalg::canonical_basis(svd.matrixV().rightCols(m));
    out.levels.push_back(std::move(level));
  }
  for (std::size_t i = 0; i + 1 < out.levels.size(); ++i) {
    const double gap = out.levels[i + 1].lambda - out.levels[i].lambda;
    if (gap < 1e-6) {
      out.warnings.push_back("real parts " + std::to_string(out.levels[i].lambda) + " and " +
                             std::to_string(out.levels[i + 1].lambda) +
                             " are within 1e-6 but treated as distinct levels");
    }
  }

  auto gather = [&](auto pred) {
    Matrix m(n, 0);
    for (const auto& l : out.levels) {
      if (pred(l.lambda)) m = linalg::hcat(m, l.basis);
    }
    return linalg::canonical_basis(linalg::orth(m));
  };
  out.plus = gather([](double l) { return l > 0.0; });
  out.zero = gather([](double l) { return l == 0.0; });
  out.minus = gather([](double l) { return l < 0.0; });
  return out;
}

/// Largest component of D g_lambda outside g_lambda, over all levels.
inline double invariance_residual(const SpectralDecomposition& dec, const Matrix& d) {
  const Matrix w = dec.level_matrix();
  const Matrix winv = w.inverse();
  double res = 0.0;
  Eigen::Index off = 0;
  for (const auto& l : dec.levels) {
    const Matrix coef = winv * (d * l.basis);
    for (Eigen::Index r = 0; r < coef.rows(); ++r) {
      if (r >= off && r < off + l.basis.cols()) continue;
      res = std::max(res, coef.row(r).cwiseAbs().maxCoeff());
    }
    off += l.basis.cols();
  }
  return res;
}

struct GradingCheck {
  bool ok = false;
  double residual = 0.0;
};

/// Verifies [g_l1, g_l2] inside g_{l1+l2} (or zero when there is no such level).
/// The residual is the largest coefficient of a bracket outside the target level,
/// measured in the (oblique) level decomposition.
inline GradingCheck check_grading(const LieAlgebra& alg, const SpectralDecomposition& dec) {
  const Matrix w = dec.level_matrix();
  const Matrix winv = w.inverse();
  std::vector<Eigen::Index> offs{0};
  for (const auto& l : dec.levels) offs.push_back(offs.back() + l.basis.cols());
  double res = 0.0;
  for (std::size_t a = 0; a < dec.levels.size(); ++a) {
    for (std::size_t b = a; b < dec.levels.size(); ++b) {
      const int t = dec.find_level(dec.levels[a].lambda + dec.levels[b].lambda);
      for (Eigen::Index u = 0; u < dec.levels[a].basis.cols(); ++u) {
        for (Eigen::Index v = 0; v < dec.levels[b].basis.cols(); ++v) {
          const Vector coef = winv * alg.bracket(dec.levels[a].basis.col(u), dec.levels[b].basis.col(v));
          for (Eigen::Index r = 0; r < coef.size(); ++r) {
            if (t >= 0 && r >= offs[t] && r < offs[t + 1]) continue;
            res = std::max(res, std::abs(coef(r)));
          }
        }
      }
    }
  }
  return {res < 1e-8, res};
}

}  // namespace liectl
