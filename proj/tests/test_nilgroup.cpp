#include "liectl/algebras.hpp"
#include "liectl/nilgroup.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace liectl;
using liectl::testing::bundled_algebras;
using liectl::testing::random_derivation;
using liectl::testing::random_vector;

namespace {

GroupPoint pt(std::initializer_list<double> v) {
  Vector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double d : v) x(i++) = d;
  return {x};
}

/// Matrix realisation of strictly_upper(m): coordinates -> m x m matrix.
Matrix to_matrix(const Vector& x, std::size_t m) {
  Matrix out = Matrix::Zero(Eigen::Index(m), Eigen::Index(m));
  Eigen::Index a = 0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) out(Eigen::Index(i), Eigen::Index(j)) = x(a++);
  }
  return out;
}

Vector from_matrix(const Matrix& u, std::size_t m) {
  Vector x(Eigen::Index(m * (m - 1) / 2));
  Eigen::Index a = 0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) x(a++) = u(Eigen::Index(i), Eigen::Index(j));
  }
  return x;
}

/// log of a unipotent matrix by its finite series.
Matrix log_unipotent(const Matrix& u) {
  const Matrix n = u - Matrix::Identity(u.rows(), u.cols());
  Matrix out = Matrix::Zero(u.rows(), u.cols());
  Matrix pw = n;
  for (Eigen::Index k = 1; k < u.rows(); ++k) {
    out += (k % 2 == 1 ? 1.0 : -1.0) / double(k) * pw;
    pw = pw * n;
  }
  return out;
}

/// Central-difference derivative at s = 0 of s -> f(s), with Richardson extrapolation.
template <class F>
Vector derivative_at_zero(F f, double h) {
  const Vector d1 = (f(h) - f(-h)) / (2 * h);
  const Vector d2 = (f(h / 2) - f(-h / 2)) / h;
  return (4.0 * d2 - d1) / 3.0;
}

}  // namespace

TEST(BchProduct, HeisenbergByHand) {
  const NilGroup h(algebras::heisenberg());
  const auto p = h.product(pt({1, 0, 0}), pt({0, 1, 0}));
  EXPECT_TRUE(p.coords.isApprox(Vector{{1.0, 1.0, 0.5}}));
}

TEST(BchProduct, IdentityAndInverseExact) {
  std::mt19937_64 rng(5);
  for (const auto& [name, alg] : bundled_algebras()) {
    const NilGroup g(alg);
    for (int t = 0; t < 50; ++t) {
      const GroupPoint x{random_vector(rng, alg.n(), 2.0)};
      EXPECT_LT((g.product(x, g.identity()).coords - x.coords).cwiseAbs().maxCoeff(), 1e-12) << name;
      EXPECT_LT((g.product(g.identity(), x).coords - x.coords).cwiseAbs().maxCoeff(), 1e-12) << name;
      EXPECT_LT(g.product(x, g.inverse(x)).coords.cwiseAbs().maxCoeff(), 1e-12) << name;
      EXPECT_LT(g.product(g.inverse(x), x).coords.cwiseAbs().maxCoeff(), 1e-12) << name;
    }
  }
}

TEST(BchProduct, Associativity) {
  std::mt19937_64 rng(8);
  for (const auto& [name, alg] : bundled_algebras()) {
    const NilGroup g(alg);
    for (int t = 0; t < 100; ++t) {
      const GroupPoint x{random_vector(rng, alg.n(), 2.0)};
      const GroupPoint y{random_vector(rng, alg.n(), 2.0)};
      const GroupPoint z{random_vector(rng, alg.n(), 2.0)};
      const Vector l = g.product(g.product(x, y), z).coords;
      const Vector r = g.product(x, g.product(y, z)).coords;
      EXPECT_LT((l - r).cwiseAbs().maxCoeff(), 1e-9) << name;
    }
  }
}

TEST(BchProduct, MatchesMatrixExponential) {
  // exp(X) exp(Y) = exp(c(X, Y)) for strictly upper triangular 4x4 (class 3) and 5x5 (class 4).
  std::mt19937_64 rng(13);
  for (std::size_t m : {4u, 5u}) {
    const NilGroup g(algebras::strictly_upper(m));
    EXPECT_EQ(g.class_k(), int(m) - 1);
    for (int t = 0; t < 30; ++t) {
      const Vector x = random_vector(rng, g.n(), 1.5);
      const Vector y = random_vector(rng, g.n(), 1.5);
      const Matrix prod = to_matrix(x, m).exp() * to_matrix(y, m).exp();
      const Vector oracle = from_matrix(log_unipotent(prod), m);
      EXPECT_LT((g.bch(x, y) - oracle).cwiseAbs().maxCoeff(), 1e-11) << "m=" << m;
    }
  }
}

TEST(BchProduct, ClassFiveUnsupported) {
  EXPECT_THROW(NilGroup(algebras::filiform(6)), Unsupported);
  EXPECT_THROW(bch_coefficients(5), Unsupported);
}

TEST(Inverse, Examples) {
  const NilGroup h(algebras::heisenberg());
  EXPECT_TRUE(h.inverse(pt({1, 1, 0.5})).coords.isApprox(Vector{{-1.0, -1.0, -0.5}}));
  EXPECT_EQ(h.inverse(h.identity()).coords, Vector::Zero(3));
  const NilGroup q(algebras::heisenberg(), {2});
  EXPECT_NEAR(q.inverse(q.point(Vector{{0, 0, 0.25}})).coords(2), 0.75, 1e-15);
}

TEST(BchCoefficients, FirstThreeExact) {
  const auto c = bch_coefficients(4).c;
  ASSERT_EQ(c.size(), 4u);
  EXPECT_EQ(c[0], 1.0);
  EXPECT_EQ(c[1], -0.5);
  EXPECT_EQ(c[2], 1.0 / 12.0);
  EXPECT_EQ(c[3], 0.0);
  EXPECT_EQ(bch_coefficients(1).c.size(), 1u);
}

TEST(BchCoefficients, FiniteDifferenceOracle) {
  // Class-4 filiform: ad(e1)^p e2 = e_{2+p}, so d/ds|0 (s e2) * (t e1) has e_{2+p}-component c_p t^p.
  const NilGroup g(algebras::filiform(5));
  const double t = 0.8;
  const Vector x = t * Vector::Unit(5, 0);
  const Vector z = Vector::Unit(5, 1);
  const Vector right = derivative_at_zero([&](double s) { return g.bch(s * z, x); }, 1e-3);
  const Vector left = derivative_at_zero([&](double s) { return g.bch(x, s * z); }, 1e-3);
  const auto c = bch_coefficients(4).c;
  for (int p = 0; p < 4; ++p) {
    EXPECT_NEAR(right(1 + p) / std::pow(t, p), c[std::size_t(p)], 1e-8) << "p=" << p;
    // The left-translated curve has the alternating expansion.
    EXPECT_NEAR(left(1 + p) / std::pow(t, p), (p % 2 ? -1.0 : 1.0) * c[std::size_t(p)], 1e-8) << "p=" << p;
  }
}

TEST(InvariantField, HeisenbergExampleSystem) {
  const NilGroup h(algebras::heisenberg());
  const Vector z{{1.0, 1.0, 0.0}};
  const auto f = invariant_field_eval(h, z, pt({0.3, -0.7, 5.0}));
  EXPECT_NEAR(f(0), 1.0, 1e-15);
  EXPECT_NEAR(f(1), 1.0, 1e-15);
  EXPECT_NEAR(f(2), (-0.7 - 0.3) / 2.0, 1e-15);
}

TEST(InvariantField, AtIdentityEqualsGenerator) {
  std::mt19937_64 rng(21);
  for (const auto& [name, alg] : bundled_algebras()) {
    const NilGroup g(alg);
    const Vector z = random_vector(rng, alg.n());
    EXPECT_EQ(invariant_field_eval(g, z, g.identity()), z) << name;
  }
}

TEST(InvariantField, FiliformClassThree) {
  const NilGroup g(algebras::filiform(4));
  const Vector z = Vector::Unit(4, 1);
  const GroupPoint x{Vector::Unit(4, 0)};
  const Vector expect{{0.0, 1.0, -0.5, 1.0 / 12.0}};
  EXPECT_LT((invariant_field_eval(g, z, x) - expect).cwiseAbs().maxCoeff(), 1e-15);
  // Oracle: finite difference of the BCH product.
  const Vector fd = derivative_at_zero([&](double s) { return g.bch(s * z, x.coords); }, 1e-3);
  EXPECT_LT((fd - expect).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(InvariantField, MatchesFiniteDifferenceEverywhere) {
  std::mt19937_64 rng(34);
  for (const auto& [name, alg] : bundled_algebras()) {
    const NilGroup g(alg);
    for (int t = 0; t < 30; ++t) {
      const GroupPoint x{random_vector(rng, alg.n(), 1.5)};
      const Vector z = random_vector(rng, alg.n());
      const double h = 1e-5;
      const Vector fd = (g.bch(h * z, x.coords) - g.bch(-h * z, x.coords)) / (2 * h);
      EXPECT_LT((fd - invariant_field_eval(g, z, x)).cwiseAbs().maxCoeff(), 1e-8) << name;
    }
  }
}

TEST(Automorphism, DiagonalFlowOnHeisenberg) {
  const NilGroup h(algebras::heisenberg());
  const double t = 0.7;
  const Matrix a = (t * Matrix(Vector{{1.0, -1.0, 0.0}}.asDiagonal())).exp();
  const auto y = automorphism_apply(h, a, pt({1, 1, 0.5}));
  EXPECT_NEAR(y.coords(0), std::exp(t), 1e-14);
  EXPECT_NEAR(y.coords(1), std::exp(-t), 1e-14);
  EXPECT_NEAR(y.coords(2), 0.5, 1e-14);
}

TEST(Automorphism, IdentityMap) {
  const NilGroup h(algebras::heisenberg());
  const auto x = pt({0.2, -1, 3});
  EXPECT_EQ(automorphism_apply(h, Matrix::Identity(3, 3), x).coords, x.coords);
}

TEST(Automorphism, RejectsNonAutomorphism) {
  const NilGroup h(algebras::heisenberg());
  EXPECT_THROW(automorphism_apply(h, Matrix(Vector{{2.0, 1.0, 1.0}}.asDiagonal()), pt({1, 1, 1})), InputError);
  EXPECT_NEAR(automorphism_residual(h.algebra(), Matrix(Vector{{2.0, 1.0, 1.0}}.asDiagonal())), 1.0, 1e-15);
}

TEST(Automorphism, HomomorphismAndFlowProperty) {
  std::mt19937_64 rng(55);
  for (const auto& [name, alg] : bundled_algebras()) {
    const NilGroup g(alg);
    for (int t = 0; t < 10; ++t) {
      const Matrix d = random_derivation(alg, rng);
      const double s1 = std::uniform_real_distribution<double>(-1, 1)(rng);
      const double s2 = std::uniform_real_distribution<double>(-1, 1)(rng);
      const Matrix a = (s1 * d).exp();
      const GroupPoint x{random_vector(rng, alg.n())};
      const GroupPoint y{random_vector(rng, alg.n())};
      const Vector lhs = automorphism_apply(g, a, g.product(x, y)).coords;
      const Vector rhs = g.product(automorphism_apply(g, a, x), automorphism_apply(g, a, y)).coords;
      EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-10) << name;
      const Vector two_steps = automorphism_apply(g, (s2 * d).exp(), automorphism_apply(g, a, x)).coords;
      const Vector one_step = automorphism_apply(g, ((s1 + s2) * d).exp(), x).coords;
      EXPECT_LT((two_steps - one_step).cwiseAbs().maxCoeff(), 1e-9) << name;
    }
  }
}

TEST(ReduceModLattice, Examples) {
  const NilGroup q(algebras::heisenberg(), {2});
  const auto r = q.reduce(Vector{{0.3, -2.0, 1.75}});
  EXPECT_TRUE(r.coords.isApprox(Vector{{0.3, -2.0, 0.75}}));
  const NilGroup h(algebras::heisenberg());
  EXPECT_EQ(h.reduce(Vector{{0.3, -2.0, 1.75}}).coords, (Vector{{0.3, -2.0, 1.75}}));
  const auto p = q.product(q.point(Vector{{0, 0, 0.9}}), q.point(Vector{{0, 0, 0.3}}));
  EXPECT_NEAR(p.coords(2), 0.2, 1e-12);
  EXPECT_NEAR(p.coords(0), 0.0, 0.0);
}

TEST(ReduceModLattice, CanonicalAfterOperations) {
  std::mt19937_64 rng(77);
  const NilGroup q(algebras::heisenberg(), {2});
  for (int t = 0; t < 200; ++t) {
    const auto x = q.point(random_vector(rng, 3, 5.0));
    const auto y = q.point(random_vector(rng, 3, 5.0));
    for (const auto& p : {x, q.product(x, y), q.inverse(x)}) {
      EXPECT_GE(p.coords(2), 0.0);
      EXPECT_LT(p.coords(2), 1.0);
    }
    // Well defined on cosets: shifting a representative by a lattice vector changes nothing.
    const GroupPoint x_shift{x.coords + Vector{{0.0, 0.0, 3.0}}};
    EXPECT_LT(q.distance(q.product(x_shift, y), q.product(x, y)), 1e-12);
  }
}

TEST(ReduceModLattice, NonCentralLatticeRejected) {
  EXPECT_THROW(NilGroup(algebras::heisenberg(), {0}), InputError);
}
