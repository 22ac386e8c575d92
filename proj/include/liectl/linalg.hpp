#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace liectl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Malformed or inconsistent user input (dimension mismatch, value outside a box, ...).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The lower central series stabilised at a nonzero subspace.
class NotNilpotent : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Request is valid mathematically but outside what this library covers.
class Unsupported : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A construction whose hypotheses do not hold for the given system.
class NotApplicable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace linalg {

inline void require_size(const Vector& v, Eigen::Index n, const char* what) {
  if (v.size() != n) {
    throw InputError(std::string(what) + ": expected length " + std::to_string(n) + ", got " +
                     std::to_string(v.size()));
  }
}

inline void require_square(const Matrix& m, Eigen::Index n, const char* what) {
  if (m.rows() != n || m.cols() != n) {
    throw InputError(std::string(what) + ": expected " + std::to_string(n) + "x" + std::to_string(n) +
                     " matrix, got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

inline Matrix empty_basis(Eigen::Index n) { return Matrix(n, 0); }

/// Orthonormal basis of the column span of `a`, numerical rank cut at `rel_tol` times the
/// largest singular value (and an absolute floor for all-zero input).
inline Matrix orth(const Matrix& a, double rel_tol = 1e-10) {
  if (a.cols() == 0 || a.rows() == 0) return empty_basis(a.rows());
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU);
  const auto& s = svd.singularValues();
  const double cut = std::max(rel_tol * (s.size() > 0 ? s(0) : 0.0), 1e-13);
  Eigen::Index r = 0;
  while (r < s.size() && s(r) > cut) ++r;
  return svd.matrixU().leftCols(r);
}

/// Re-expresses the span of the orthonormal basis `q` with a basis that is as close to the
/// coordinate axes as possible: project e_1, e_2, ... onto the span and Gram-Schmidt the
/// ones that add rank. Deterministic and sign-stable.
inline Matrix canonical_basis(const Matrix& q) {
  const Eigen::Index n = q.rows();
  const Eigen::Index d = q.cols();
  if (d == 0) return empty_basis(n);
  const Matrix proj = q * q.transpose();
  Matrix out(n, d);
  Eigen::Index found = 0;
  for (Eigen::Index i = 0; i < n && found < d; ++i) {
    Vector v = proj.col(i);
    for (Eigen::Index j = 0; j < found; ++j) v -= out.col(j).dot(v) * out.col(j);
    for (Eigen::Index j = 0; j < found; ++j) v -= out.col(j).dot(v) * out.col(j);
    const double nv = v.norm();
    if (nv > 1e-8) out.col(found++) = v / nv;
  }
  if (found < d) return q;
  return out;
}

/// Orthonormal basis of the kernel of `a`.
inline Matrix null_space(const Matrix& a, double rel_tol = 1e-10) {
  const Eigen::Index n = a.cols();
  if (a.rows() == 0) return Matrix::Identity(n, n);
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  const double cut = std::max(rel_tol * (s.size() > 0 ? s(0) : 0.0), 1e-13);
  Eigen::Index r = 0;
  while (r < s.size() && s(r) > cut) ++r;
  return svd.matrixV().rightCols(n - r);
}

/// Orthonormal basis of {v in span(outer) : v orthogonal to span(inner)}; `inner` must lie in `outer`.
inline Matrix orth_complement_in(const Matrix& outer, const Matrix& inner) {
  const Eigen::Index n = outer.rows();
  if (outer.cols() == 0) return empty_basis(n);
  Matrix p = Matrix::Identity(n, n);
  if (inner.cols() > 0) p -= inner * inner.transpose();
  return orth(p * outer);
}

/// Distance from `v` to span(basis) for an orthonormal basis.
inline double distance_to_span(const Vector& v, const Matrix& basis) {
  if (basis.cols() == 0) return v.norm();
  return (v - basis * (basis.transpose() * v)).norm();
}

inline Matrix hcat(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

inline Matrix expm(const Matrix& a) {
  if (a.rows() == 0) return a;
  return a.exp();
}

inline double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

}  // namespace linalg
}  // namespace liectl
