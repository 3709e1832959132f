#include "topoforge/fem.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>

namespace topoforge::fem {

void DesignDomain::validate() const {
  if (nx < 1 || ny < 1) throw std::invalid_argument("domain needs nx >= 1 and ny >= 1");
  if (!(elem_size > 0.0) || !(thickness > 0.0))
    throw std::invalid_argument("element size and thickness must be positive");
  if (!(Emin > 0.0) || !(Emin < E0)) throw std::invalid_argument("need 0 < Emin < E0");
  if (!(nu >= 0.0 && nu < 0.5)) throw std::invalid_argument("Poisson ratio must lie in [0, 0.5)");
}

bool DesignDomain::is_boundary_node(int node) const {
  if (node < 0 || node >= node_count()) return false;
  const int i = node_i(node), j = node_j(node);
  return i == 0 || i == nx || j == 0 || j == ny;
}

std::array<int, 4> DesignDomain::element_nodes(int c, int r) const {
  return {node_index(c, r), node_index(c + 1, r), node_index(c + 1, r + 1), node_index(c, r + 1)};
}

std::array<int, 8> DesignDomain::element_dofs(int c, int r) const {
  const auto n = element_nodes(c, r);
  std::array<int, 8> dofs{};
  for (int a = 0; a < 4; ++a) {
    dofs[2 * a] = 2 * n[a];
    dofs[2 * a + 1] = 2 * n[a] + 1;
  }
  return dofs;
}

std::vector<int> DesignDomain::elements_adjacent_to_node(int node) const {
  std::vector<int> out;
  const int i = node_i(node), j = node_j(node);
  for (int r = j - 1; r <= j; ++r)
    for (int c = i - 1; c <= i; ++c)
      if (c >= 0 && c < nx && r >= 0 && r < ny) out.push_back(r * nx + c);
  return out;
}

double Field::mean() const {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double Field::max() const {
  if (values.empty()) return 0.0;
  return *std::max_element(values.begin(), values.end());
}

Supports Supports::from_dofs(std::vector<int> dofs) {
  std::sort(dofs.begin(), dofs.end());
  dofs.erase(std::unique(dofs.begin(), dofs.end()), dofs.end());
  return Supports{std::move(dofs)};
}

bool Supports::is_fixed(int dof) const {
  return std::binary_search(fixed_dofs.begin(), fixed_dofs.end(), dof);
}

Eigen::Matrix3d plane_stress_matrix(double E, double nu) {
  Eigen::Matrix3d D;
  const double s = E / (1.0 - nu * nu);
  D << s, s * nu, 0.0,
       s * nu, s, 0.0,
       0.0, 0.0, s * (1.0 - nu) / 2.0;
  return D;
}

Eigen::Matrix<double, 3, 8> strain_displacement(double xi, double eta, double elem_size) {
  static constexpr double xi_a[4] = {-1.0, 1.0, 1.0, -1.0};
  static constexpr double eta_a[4] = {-1.0, -1.0, 1.0, 1.0};
  const double scale = 2.0 / elem_size;
  Eigen::Matrix<double, 3, 8> B = Eigen::Matrix<double, 3, 8>::Zero();
  for (int a = 0; a < 4; ++a) {
    const double dndx = 0.25 * xi_a[a] * (1.0 + eta * eta_a[a]) * scale;
    const double dndy = 0.25 * eta_a[a] * (1.0 + xi * xi_a[a]) * scale;
    B(0, 2 * a) = dndx;
    B(1, 2 * a + 1) = dndy;
    B(2, 2 * a) = dndy;
    B(2, 2 * a + 1) = dndx;
  }
  return B;
}

ElementMatrix element_stiffness(double E, double nu, double elem_size, double thickness) {
  if (E < 0.0) throw std::invalid_argument("Young's modulus must be non-negative");
  if (!(nu >= 0.0 && nu < 0.5)) throw std::invalid_argument("Poisson ratio must lie in [0, 0.5)");
  if (!(elem_size > 0.0) || !(thickness > 0.0))
    throw std::invalid_argument("element size and thickness must be positive");

  const Eigen::Matrix3d D = plane_stress_matrix(E, nu);
  const double g = 1.0 / std::sqrt(3.0);
  const double detj = elem_size * elem_size / 4.0;
  ElementMatrix ke = ElementMatrix::Zero();
  for (double xi : {-g, g}) {
    for (double eta : {-g, g}) {
      const auto B = strain_displacement(xi, eta, elem_size);
      ke.noalias() += B.transpose() * D * B * (detj * thickness);
    }
  }
  return 0.5 * (ke + ke.transpose());
}

double interpolated_modulus(const DesignDomain& domain, double rho, double p) {
  return domain.Emin + std::pow(rho, p) * (domain.E0 - domain.Emin);
}

AssembledSystem assemble(const DesignDomain& domain, const DensityField& rho, double p) {
  domain.validate();
  if (rho.nx != domain.nx || rho.ny != domain.ny ||
      rho.size() != static_cast<std::size_t>(domain.element_count()))
    throw std::invalid_argument("density field does not match the design domain");
  if (p < 1.0) throw std::invalid_argument("penalization exponent must be >= 1");

  AssembledSystem sys;
  sys.domain = domain;
  sys.unit_ke = element_stiffness(1.0, domain.nu, domain.elem_size, domain.thickness);
  sys.moduli.resize(rho.size());
  for (std::size_t e = 0; e < rho.size(); ++e) {
    const double v = rho.values[e];
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("densities must lie in [0, 1]");
    sys.moduli[e] = interpolated_modulus(domain, v, p);
  }

  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(static_cast<std::size_t>(domain.element_count()) * 64);
  for (int r = 0; r < domain.ny; ++r) {
    for (int c = 0; c < domain.nx; ++c) {
      const double E = sys.moduli[static_cast<std::size_t>(r) * domain.nx + c];
      const auto dofs = domain.element_dofs(c, r);
      for (int a = 0; a < 8; ++a)
        for (int b = 0; b < 8; ++b) triplets.emplace_back(dofs[a], dofs[b], E * sys.unit_ke(a, b));
    }
  }
  sys.K.resize(domain.dof_count(), domain.dof_count());
  sys.K.setFromTriplets(triplets.begin(), triplets.end());
  sys.K.makeCompressed();
  return sys;
}

std::vector<double> load_vector(const DesignDomain& domain, const LoadSpec& load) {
  if (load.node < 0 || load.node >= domain.node_count())
    throw std::invalid_argument("load node outside the mesh");
  std::vector<double> f(static_cast<std::size_t>(domain.dof_count()), 0.0);
  f[2 * static_cast<std::size_t>(load.node)] = load.fx;
  f[2 * static_cast<std::size_t>(load.node) + 1] = load.fy;
  return f;
}

bool constrains_rigid_body_modes(const DesignDomain& domain, const Supports& supports) {
  if (supports.fixed_dofs.empty()) return false;
  // Rows are the rigid-body modes (tx, ty, rotation) evaluated at each fixed DOF.
  const double cx = 0.5 * domain.nx, cy = 0.5 * domain.ny;
  Eigen::MatrixXd R(static_cast<Eigen::Index>(supports.fixed_dofs.size()), 3);
  for (std::size_t k = 0; k < supports.fixed_dofs.size(); ++k) {
    const int dof = supports.fixed_dofs[k];
    const int node = dof / 2;
    const double x = domain.node_i(node) - cx, y = domain.node_j(node) - cy;
    if (dof % 2 == 0) R.row(static_cast<Eigen::Index>(k)) << 1.0, 0.0, -y;
    else R.row(static_cast<Eigen::Index>(k)) << 0.0, 1.0, x;
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(R);
  lu.setThreshold(1e-10);
  return lu.rank() == 3;
}

namespace {

struct ReducedSystem {
  std::vector<int> free_dofs;
  std::vector<int> reduced_index;  // -1 for fixed dofs
  SparseMatrix K;
  Eigen::VectorXd f;
};

ReducedSystem reduce(const SparseMatrix& K, std::span<const double> force, const Supports& supports) {
  ReducedSystem red;
  const int n = static_cast<int>(K.rows());
  red.reduced_index.assign(static_cast<std::size_t>(n), -1);
  for (int d = 0; d < n; ++d) {
    if (!supports.is_fixed(d)) {
      red.reduced_index[d] = static_cast<int>(red.free_dofs.size());
      red.free_dofs.push_back(d);
    }
  }
  const int m = static_cast<int>(red.free_dofs.size());
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(static_cast<std::size_t>(K.nonZeros()));
  for (int col = 0; col < K.outerSize(); ++col) {
    const int rc = red.reduced_index[col];
    if (rc < 0) continue;
    for (SparseMatrix::InnerIterator it(K, col); it; ++it) {
      const int rr = red.reduced_index[it.row()];
      if (rr >= 0) triplets.emplace_back(rr, rc, it.value());
    }
  }
  red.K.resize(m, m);
  red.K.setFromTriplets(triplets.begin(), triplets.end());
  red.K.makeCompressed();
  red.f.resize(m);
  for (int k = 0; k < m; ++k) red.f[k] = force[red.free_dofs[k]];
  return red;
}

std::string format_residual(double r) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(3) << r;
  return os.str();
}

}  // namespace

// Iterative refinement for the direct solvers; high stiffness contrast between
// solid and void elements can leave a single solve short of the tolerance.
template <class Solve>
void refine(const ReducedSystem& red, Eigen::VectorXd& u, double fnorm, double tol, Solve&& solve_with) {
  double best = (red.K * u - red.f).norm() / fnorm;
  for (int pass = 0; pass < 8 && best > 0.1 * tol; ++pass) {
    const Eigen::VectorXd next = u + solve_with(red.f - red.K * u);
    const double res = (red.K * next - red.f).norm() / fnorm;
    if (!(res < best)) break;
    u = next;
    best = res;
  }
}

FeaSolution solve(const AssembledSystem& system, std::span<const double> force,
                  const Supports& supports, const SolverOptions& options) {
  const auto& domain = system.domain;
  const int n = domain.dof_count();
  if (static_cast<int>(force.size()) != n) throw std::invalid_argument("force vector has wrong length");
  for (int d : supports.fixed_dofs)
    if (d < 0 || d >= n) throw std::invalid_argument("fixed DOF index outside the mesh");
  if (!constrains_rigid_body_modes(domain, supports))
    throw FeaError(FeaError::Kind::Singular,
                   "singular stiffness: supports do not restrain all rigid-body modes");

  FeaSolution sol;
  sol.displacements.assign(static_cast<std::size_t>(n), 0.0);
  sol.element_energies.assign(static_cast<std::size_t>(domain.element_count()), 0.0);

  ReducedSystem red = reduce(system.K, force, supports);
  const double fnorm = red.f.norm();
  if (fnorm == 0.0) return sol;

  SolverKind kind = options.kind;
  if (kind == SolverKind::Auto)
    kind = red.K.rows() < options.dense_below_dofs ? SolverKind::Dense : SolverKind::Cholesky;

  Eigen::VectorXd u;
  switch (kind) {
    case SolverKind::Dense: {
      Eigen::MatrixXd dense(red.K);
      Eigen::LLT<Eigen::MatrixXd> llt(dense);
      if (llt.info() != Eigen::Success)
        throw FeaError(FeaError::Kind::Singular, "dense factorization failed: matrix not positive definite");
      u = llt.solve(red.f);
      refine(red, u, fnorm, options.tol, [&](const Eigen::VectorXd& r) { return llt.solve(r); });
      break;
    }
    case SolverKind::Cholesky: {
      Eigen::SimplicialLDLT<SparseMatrix> ldlt(red.K);
      if (ldlt.info() != Eigen::Success)
        throw FeaError(FeaError::Kind::Singular, "sparse factorization failed");
      if ((ldlt.vectorD().array() <= 0.0).any())
        throw FeaError(FeaError::Kind::Singular, "sparse factorization found a non-positive pivot");
      u = ldlt.solve(red.f);
      refine(red, u, fnorm, options.tol, [&](const Eigen::VectorXd& r) { return ldlt.solve(r); });
      break;
    }
    case SolverKind::Pcg:
    case SolverKind::Auto: {
      Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper,
                               Eigen::DiagonalPreconditioner<double>> cg;
      cg.setTolerance(options.tol);
      cg.setMaxIterations(options.max_iterations);
      cg.compute(red.K);
      u = cg.solve(red.f);
      sol.iterations = static_cast<int>(cg.iterations());
      if (cg.info() != Eigen::Success) {
        const double achieved = (red.K * u - red.f).norm() / fnorm;
        throw FeaError(FeaError::Kind::NotConverged,
                       "PCG stopped after " + std::to_string(cg.iterations()) +
                           " iterations with relative residual " + format_residual(achieved),
                       achieved);
      }
      break;
    }
  }

  const double rnorm = (red.K * u - red.f).norm();
  sol.relative_residual = rnorm / fnorm;
  // PCG tracks its recursive residual; allow the true residual a little roundoff slack.
  // The direct solvers are judged by normwise backward error instead: with void
  // elements at Emin the plain relative residual bottoms out at eps * cond(K).
  double measure = sol.relative_residual, allowed = options.tol;
  if (kind == SolverKind::Pcg) {
    allowed = 10.0 * options.tol;
  } else {
    double knorm = 0.0;
    for (Eigen::Index c = 0; c < red.K.outerSize(); ++c) {
      double col = 0.0;
      for (SparseMatrix::InnerIterator it(red.K, c); it; ++it) col += std::abs(it.value());
      knorm = std::max(knorm, col);
    }
    measure = rnorm / (knorm * u.norm() + fnorm);
  }
  if (!std::isfinite(measure) || measure > allowed)
    throw FeaError(FeaError::Kind::NotConverged,
                   "linear solve did not reach tolerance, relative residual " +
                       format_residual(sol.relative_residual),
                   sol.relative_residual);

  for (std::size_t k = 0; k < red.free_dofs.size(); ++k)
    sol.displacements[red.free_dofs[k]] = u[static_cast<Eigen::Index>(k)];
  sol.compliance = red.f.dot(u);

  ElementVector ue;
  for (int e = 0; e < domain.element_count(); ++e) {
    const auto dofs = domain.element_dofs(e);
    for (int a = 0; a < 8; ++a) ue[a] = sol.displacements[dofs[a]];
    sol.element_energies[e] = ue.dot(system.unit_ke * ue);
  }
  return sol;
}

FeaSolution solve(const AssembledSystem& system, const LoadSpec& load, const Supports& supports,
                  const SolverOptions& options) {
  const auto f = load_vector(system.domain, load);
  return solve(system, f, supports, options);
}

namespace {

void check_field_inputs(const DesignDomain& domain, const DensityField& rho,
                        std::span<const double> displacements) {
  if (rho.nx != domain.nx || rho.ny != domain.ny ||
      rho.size() != static_cast<std::size_t>(domain.element_count()))
    throw std::invalid_argument("density field does not match the design domain");
  if (static_cast<int>(displacements.size()) != domain.dof_count())
    throw std::invalid_argument("displacement vector has wrong length");
}

}  // namespace

Eigen::Vector3d element_centroid_stress(const DesignDomain& domain, double modulus,
                                        std::span<const double> displacements, int e) {
  const auto B0 = strain_displacement(0.0, 0.0, domain.elem_size);
  const auto dofs = domain.element_dofs(e);
  ElementVector ue;
  for (int a = 0; a < 8; ++a) ue[a] = displacements[dofs[a]];
  return plane_stress_matrix(modulus, domain.nu) * (B0 * ue);
}

ScalarField von_mises_field(const DesignDomain& domain, const DensityField& rho, double p,
                            std::span<const double> displacements) {
  check_field_inputs(domain, rho, displacements);
  ScalarField out(domain.nx, domain.ny);
  for (int e = 0; e < domain.element_count(); ++e) {
    const double E = interpolated_modulus(domain, rho.values[e], p);
    const Eigen::Vector3d s = element_centroid_stress(domain, E, displacements, e);
    const double v = s[0] * s[0] + s[1] * s[1] - s[0] * s[1] + 3.0 * s[2] * s[2];
    out.values[e] = std::sqrt(std::max(v, 0.0));
  }
  return out;
}

ScalarField strain_energy_density_field(const DesignDomain& domain, const DensityField& rho,
                                        double p, std::span<const double> displacements) {
  check_field_inputs(domain, rho, displacements);
  const ElementMatrix ke = element_stiffness(1.0, domain.nu, domain.elem_size, domain.thickness);
  const double volume = domain.elem_size * domain.elem_size * domain.thickness;
  ScalarField out(domain.nx, domain.ny);
  ElementVector ue;
  for (int e = 0; e < domain.element_count(); ++e) {
    const auto dofs = domain.element_dofs(e);
    for (int a = 0; a < 8; ++a) ue[a] = displacements[dofs[a]];
    const double E = interpolated_modulus(domain, rho.values[e], p);
    out.values[e] = std::max(0.0, 0.5 * E * ue.dot(ke * ue) / volume);
  }
  return out;
}

}  // namespace topoforge::fem
