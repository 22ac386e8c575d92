#pragma once

#include "liectl/lie_core.hpp"

#include <string>
#include <vector>

// Standard small algebras used by the bundled examples and the test suites.
namespace liectl::algebras {

inline LieAlgebra abelian(std::size_t n) { return LieAlgebra::from_brackets(n, {}); }

/// [e1, e2] = e3.
inline LieAlgebra heisenberg() { return LieAlgebra::from_brackets(3, {{0, 1, 2, 1.0}}); }

/// Model filiform algebra of dimension n >= 3: [e1, e_i] = e_{i+1}, i = 2..n-1. Class n - 1.
inline LieAlgebra filiform(std::size_t n) {
  std::vector<BracketEntry> e;
  for (std::size_t i = 1; i + 1 < n; ++i) e.push_back({0, i, i + 1, 1.0});
  return LieAlgebra::from_brackets(n, e);
}

/// sl(2) in the basis (h, e, f): [h,e] = 2e, [h,f] = -2f, [e,f] = h.
inline LieAlgebra sl2() {
  return LieAlgebra::from_brackets(3, {{0, 1, 1, 2.0}, {0, 2, 2, -2.0}, {1, 2, 0, 1.0}}, {"h", "e", "f"});
}

/// Strictly upper triangular m x m matrices, basis E_ij (i < j) in row-major order.
inline LieAlgebra strictly_upper(std::size_t m) {
  std::vector<std::pair<std::size_t, std::size_t>> idx;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) idx.emplace_back(i, j);
  }
  auto find = [&](std::size_t i, std::size_t j) {
    for (std::size_t a = 0; a < idx.size(); ++a) {
      if (idx[a].first == i && idx[a].second == j) return a;
    }
    return idx.size();
  };
  std::vector<BracketEntry> e;
  // [E_ij, E_kl] = d_jk E_il - d_li E_kj
  for (std::size_t a = 0; a < idx.size(); ++a) {
    for (std::size_t b = a + 1; b < idx.size(); ++b) {
      const auto [i, j] = idx[a];
      const auto [k, l] = idx[b];
      if (j == k) e.push_back({a, b, find(i, l), 1.0});
      if (l == i) e.push_back({a, b, find(k, j), -1.0});
    }
  }
  return LieAlgebra::from_brackets(idx.size(), e);
}

}  // namespace liectl::algebras
