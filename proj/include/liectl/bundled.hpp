#pragma once

#include "liectl/algebras.hpp"
#include "liectl/linsys.hpp"

#include <string>

// The worked example systems, built in code. configs/*.yaml describe the same systems.
namespace liectl::bundled {

/// x' = x + u, y' = -y + u, u in [-1, 1].
inline LinearSystem r2() {
  return LinearSystem(NilGroup(algebras::abelian(2)), Vector{{1.0, -1.0}}.asDiagonal(), {Vector{{1.0, 1.0}}},
                      ControlBox({{-1.0, 1.0}}));
}

/// Heisenberg group, optionally modulo the central lattice {(0, 0, p)}; D = diag(1, -1, 0), Z = e1 + e2.
/// In coordinates: x' = x + u, y' = -y + u, z' = (u / 2)(y - x).
inline LinearSystem heisenberg(bool quotient) {
  std::vector<std::size_t> lattice;
  if (quotient) lattice.push_back(2);
  return LinearSystem(NilGroup(algebras::heisenberg(), lattice), Vector{{1.0, -1.0, 0.0}}.asDiagonal(),
                      {Vector{{1.0, 1.0, 0.0}}}, ControlBox({{-1.0, 1.0}}));
}

/// x' = u on R, u in [-1, 1]: every eigenvalue of the drift is zero.
inline LinearSystem line_integrator() {
  return LinearSystem(NilGroup(algebras::abelian(1)), Matrix::Zero(1, 1), {Vector{{1.0}}},
                      ControlBox({{-1.0, 1.0}}));
}

}  // namespace liectl::bundled
