#pragma once

// Plane-stress finite-element analysis on a regular grid of bilinear
// quadrilateral (Q4) elements.
//
// Conventions used throughout the library:
//   node (i, j), 0 <= i <= nx, 0 <= j <= ny, has index j * (nx + 1) + i
//   element (c, r), 0 <= c < nx, 0 <= r < ny, has index r * nx + c
//   global DOF of node n along axis a (0 = x, 1 = y) is 2 * n + a
//   x grows with i / c, y grows with j / r.

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

namespace topoforge::fem {

struct DesignDomain {
  int nx = 64;
  int ny = 64;
  double elem_size = 1.0;
  double E0 = 1.0;
  double Emin = 1e-9;
  double nu = 0.3;
  double thickness = 1.0;

  void validate() const;

  int node_count() const { return (nx + 1) * (ny + 1); }
  int dof_count() const { return 2 * node_count(); }
  int element_count() const { return nx * ny; }
  int node_index(int i, int j) const { return j * (nx + 1) + i; }
  int node_i(int node) const { return node % (nx + 1); }
  int node_j(int node) const { return node / (nx + 1); }
  bool is_boundary_node(int node) const;

  // Counter-clockwise node order: (c,r), (c+1,r), (c+1,r+1), (c,r+1).
  std::array<int, 4> element_nodes(int c, int r) const;
  std::array<int, 8> element_dofs(int c, int r) const;
  std::array<int, 8> element_dofs(int e) const { return element_dofs(e % nx, e / nx); }

  // Elements sharing the node (1, 2 or 4 of them).
  std::vector<int> elements_adjacent_to_node(int node) const;
};

// Element-wise scalar grid, row-major by element (index r * nx + c).
struct Field {
  int nx = 0;
  int ny = 0;
  std::vector<double> values;

  Field() = default;
  Field(int nx_, int ny_, double fill = 0.0)
      : nx(nx_), ny(ny_), values(static_cast<std::size_t>(nx_) * ny_, fill) {}

  double& at(int c, int r) { return values[static_cast<std::size_t>(r) * nx + c]; }
  double at(int c, int r) const { return values[static_cast<std::size_t>(r) * nx + c]; }
  std::size_t size() const { return values.size(); }
  double mean() const;
  double max() const;
};

using DensityField = Field;
using ScalarField = Field;

struct Supports {
  std::vector<int> fixed_dofs;  // sorted, unique

  static Supports from_dofs(std::vector<int> dofs);
  bool is_fixed(int dof) const;
  bool empty() const { return fixed_dofs.empty(); }
};

struct LoadSpec {
  int node = 0;
  double fx = 0.0;
  double fy = 0.0;
};

using ElementMatrix = Eigen::Matrix<double, 8, 8>;
using ElementVector = Eigen::Matrix<double, 8, 1>;
using SparseMatrix = Eigen::SparseMatrix<double>;

// Bilinear plane-stress stiffness via 2x2 Gauss quadrature. Throws
// std::invalid_argument for E < 0, nu outside [0, 0.5), or non-positive sizes.
ElementMatrix element_stiffness(double E, double nu, double elem_size, double thickness);

// Plane-stress constitutive matrix for modulus E, Voigt order [xx, yy, xy].
Eigen::Matrix3d plane_stress_matrix(double E, double nu);

// Strain-displacement matrix at natural coordinates (xi, eta) in [-1, 1]^2.
Eigen::Matrix<double, 3, 8> strain_displacement(double xi, double eta, double elem_size);

// E_e = Emin + rho_e^p (E0 - Emin).
double interpolated_modulus(const DesignDomain& domain, double rho, double p);

struct AssembledSystem {
  DesignDomain domain;
  std::vector<double> moduli;  // E_e per element
  ElementMatrix unit_ke;       // element matrix at E = 1
  SparseMatrix K;
};

AssembledSystem assemble(const DesignDomain& domain, const DensityField& rho, double p);

enum class SolverKind { Auto, Dense, Cholesky, Pcg };

struct SolverOptions {
  SolverKind kind = SolverKind::Auto;
  double tol = 1e-8;          // relative residual on the free DOFs
  int max_iterations = 50000; // PCG only
  int dense_below_dofs = 200;
};

class FeaError : public std::runtime_error {
 public:
  enum class Kind { Singular, NotConverged };
  FeaError(Kind kind, const std::string& what, double residual = 0.0)
      : std::runtime_error(what), kind_(kind), residual_(residual) {}
  Kind kind() const { return kind_; }
  double residual() const { return residual_; }

 private:
  Kind kind_;
  double residual_;
};

struct FeaSolution {
  std::vector<double> displacements;
  double compliance = 0.0;
  // u_e^T k_unit u_e per element; compliance = sum_e E_e * element_energies[e].
  std::vector<double> element_energies;
  double relative_residual = 0.0;
  int iterations = 0;
};

std::vector<double> load_vector(const DesignDomain& domain, const LoadSpec& load);

// True when the fixed DOFs remove all three in-plane rigid-body modes.
bool constrains_rigid_body_modes(const DesignDomain& domain, const Supports& supports);

FeaSolution solve(const AssembledSystem& system, std::span<const double> force,
                  const Supports& supports, const SolverOptions& options = {});
FeaSolution solve(const AssembledSystem& system, const LoadSpec& load,
                  const Supports& supports, const SolverOptions& options = {});

// Element-centroid von Mises stress with the modulus implied by rho.
ScalarField von_mises_field(const DesignDomain& domain, const DensityField& rho, double p,
                            std::span<const double> displacements);

// Element-averaged strain energy density: 0.5 u_e^T K_e u_e / (h^2 t).
ScalarField strain_energy_density_field(const DesignDomain& domain, const DensityField& rho,
                                        double p, std::span<const double> displacements);

// Centroid stress components [sxx, syy, txy] of element e.
Eigen::Vector3d element_centroid_stress(const DesignDomain& domain, double modulus,
                                        std::span<const double> displacements, int e);

}  // namespace topoforge::fem
