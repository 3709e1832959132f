#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "topoforge/fem.hpp"
#include "test_support.hpp"

using namespace topoforge::fem;

namespace {

// Independent Bt D B integration with a 4-point Gauss-Legendre rule per axis.
ElementMatrix oracle_element_stiffness(double E, double nu, double h, double t) {
  const double gp[4] = {-0.8611363115940526, -0.3399810435848563, 0.3399810435848563,
                        0.8611363115940526};
  const double gw[4] = {0.3478548451374538, 0.6521451548625461, 0.6521451548625461,
                        0.3478548451374538};
  const double nodes[4][2] = {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}};
  const double c = E / (1 - nu * nu);
  double D[3][3] = {{c, c * nu, 0}, {c * nu, c, 0}, {0, 0, c * (1 - nu) / 2}};
  ElementMatrix K = ElementMatrix::Zero();
  for (int a = 0; a < 4; ++a) {
    for (int b = 0; b < 4; ++b) {
      const double xi = gp[a], eta = gp[b];
      double B[3][8] = {};
      for (int n = 0; n < 4; ++n) {
        const double dx = nodes[n][0] * (1 + eta * nodes[n][1]) / 4 * (2 / h);
        const double dy = nodes[n][1] * (1 + xi * nodes[n][0]) / 4 * (2 / h);
        B[0][2 * n] = dx;
        B[1][2 * n + 1] = dy;
        B[2][2 * n] = dy;
        B[2][2 * n + 1] = dx;
      }
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
          double s = 0;
          for (int k = 0; k < 3; ++k)
            for (int l = 0; l < 3; ++l) s += B[k][i] * D[k][l] * B[l][j];
          K(i, j) += s * gw[a] * gw[b] * (h * h / 4) * t;
        }
    }
  }
  return K;
}

DesignDomain small_domain(int nx, int ny) {
  DesignDomain d;
  d.nx = nx;
  d.ny = ny;
  return d;
}

Supports left_edge_clamped(const DesignDomain& d) {
  std::vector<int> dofs;
  for (int j = 0; j <= d.ny; ++j) {
    dofs.push_back(2 * d.node_index(0, j));
    dofs.push_back(2 * d.node_index(0, j) + 1);
  }
  return Supports::from_dofs(dofs);
}

// Left edge on x-rollers, bottom-left pinned in y, consistent traction s on the right edge.
struct PatchTest {
  DesignDomain domain;
  Supports supports;
  std::vector<double> force;
};

PatchTest make_patch_test(int n, double traction) {
  PatchTest pt;
  pt.domain = small_domain(n, n);
  std::vector<int> dofs;
  for (int j = 0; j <= n; ++j) dofs.push_back(2 * pt.domain.node_index(0, j));
  dofs.push_back(2 * pt.domain.node_index(0, 0) + 1);
  pt.supports = Supports::from_dofs(dofs);
  pt.force.assign(pt.domain.dof_count(), 0.0);
  const double h = pt.domain.elem_size;
  for (int j = 0; j <= n; ++j) {
    const double share = (j == 0 || j == n) ? 0.5 : 1.0;
    pt.force[2 * pt.domain.node_index(n, j)] = traction * h * share * pt.domain.thickness;
  }
  return pt;
}

}  // namespace

TEST(ElementStiffness, ZeroModulusGivesZeroMatrix) {
  EXPECT_EQ(element_stiffness(0.0, 0.3, 1.0, 1.0).cwiseAbs().maxCoeff(), 0.0);
}

TEST(ElementStiffness, LinearInModulus) {
  const auto k1 = element_stiffness(1.7, 0.3, 1.0, 1.0);
  const auto k2 = element_stiffness(3.4, 0.3, 1.0, 1.0);
  EXPECT_LT((k2 - 2.0 * k1).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(ElementStiffness, MatchesHighOrderQuadratureOracle) {
  for (double h : {1.0, 0.5, 2.0}) {
    const auto k = element_stiffness(1.0, 0.3, h, 1.0);
    const auto ref = oracle_element_stiffness(1.0, 0.3, h, 1.0);
    EXPECT_LT((k - ref).cwiseAbs().maxCoeff(), 1e-12) << "h=" << h;
  }
}

TEST(ElementStiffness, SymmetricWithThreeRigidBodyModes) {
  const auto k = element_stiffness(1.0, 0.3, 1.0, 1.0);
  EXPECT_EQ((k - k.transpose()).cwiseAbs().maxCoeff(), 0.0);
  Eigen::SelfAdjointEigenSolver<ElementMatrix> eig(k);
  const auto ev = eig.eigenvalues();
  int zeros = 0;
  for (int i = 0; i < 8; ++i) {
    EXPECT_GT(ev[i], -1e-12);
    if (std::abs(ev[i]) < 1e-10) ++zeros;
  }
  EXPECT_EQ(zeros, 3);
}

TEST(ElementStiffness, RejectsInvalidMaterial) {
  EXPECT_THROW(element_stiffness(1.0, 0.5, 1.0, 1.0), std::invalid_argument);
  EXPECT_THROW(element_stiffness(-1.0, 0.3, 1.0, 1.0), std::invalid_argument);
  EXPECT_THROW(element_stiffness(1.0, 0.3, 0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(element_stiffness(1.0, 0.3, 1.0, -2.0), std::invalid_argument);
}

TEST(Assemble, PowerLawModuli) {
  const auto d = small_domain(3, 2);
  EXPECT_DOUBLE_EQ(assemble(d, DensityField(3, 2, 1.0), 3.0).moduli[0], d.E0);
  EXPECT_DOUBLE_EQ(assemble(d, DensityField(3, 2, 0.0), 3.0).moduli[0], d.Emin);
  const auto half = assemble(d, DensityField(3, 2, 0.5), 3.0);
  for (double E : half.moduli) EXPECT_DOUBLE_EQ(E, 1e-9 + 0.125 * (1.0 - 1e-9));
}

TEST(Assemble, SymmetricGlobalMatrix) {
  const auto d = small_domain(5, 4);
  std::mt19937_64 rng(3);
  const auto rho = topoforge::testing::random_density(d, rng);
  const Eigen::MatrixXd K(assemble(d, rho, 3.0).K);
  EXPECT_EQ(K.rows(), d.dof_count());
  EXPECT_EQ((K - K.transpose()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Assemble, RejectsMismatchedDensity) {
  EXPECT_THROW(assemble(small_domain(3, 3), DensityField(3, 2, 1.0), 3.0), std::invalid_argument);
  EXPECT_THROW(assemble(small_domain(3, 3), DensityField(3, 3, 1.5), 3.0), std::invalid_argument);
  EXPECT_THROW(assemble(small_domain(3, 3), DensityField(3, 3, 1.0), 0.5), std::invalid_argument);
}

TEST(Solve, ZeroLoadGivesZeroSolution) {
  const auto d = small_domain(4, 4);
  const auto sys = assemble(d, DensityField(4, 4, 1.0), 3.0);
  const auto sol = solve(sys, LoadSpec{d.node_index(4, 2), 0.0, 0.0}, left_edge_clamped(d));
  EXPECT_EQ(sol.compliance, 0.0);
  for (double u : sol.displacements) EXPECT_EQ(u, 0.0);
}

TEST(Solve, SingleElementMatchesDenseOracle) {
  const auto d = small_domain(1, 1);
  const auto sys = assemble(d, DensityField(1, 1, 1.0), 3.0);
  // Bottom two nodes clamped; local DOFs 0..3 are global DOFs 0..3 here.
  const Supports sup = Supports::from_dofs({0, 1, 2, 3});
  const LoadSpec load{d.node_index(1, 1), 0.3, -1.0};
  const auto sol = solve(sys, load, sup);

  // Dense 8x8 with the constrained rows/cols replaced by identity.
  Eigen::Matrix<double, 8, 8> A = oracle_element_stiffness(1.0, 0.3, 1.0, 1.0);
  Eigen::Matrix<double, 8, 1> f = Eigen::Matrix<double, 8, 1>::Zero();
  f[4] = 0.3;
  f[5] = -1.0;
  for (int k = 0; k < 4; ++k) {
    A.row(k).setZero();
    A.col(k).setZero();
    A(k, k) = 1.0;
  }
  const Eigen::Matrix<double, 8, 1> u = A.fullPivLu().solve(f);
  const auto dofs = d.element_dofs(0, 0);
  for (int k = 0; k < 8; ++k) EXPECT_NEAR(sol.displacements[dofs[k]], u[k], 1e-10);
  EXPECT_NEAR(sol.compliance, f.dot(u), 1e-10);
}

TEST(Solve, PatchTestGivesUniformStress) {
  const auto pt = make_patch_test(4, 1.0);
  const DensityField solid(4, 4, 1.0);
  const auto sys = assemble(pt.domain, solid, 3.0);
  const auto sol = solve(sys, pt.force, pt.supports);
  for (int e = 0; e < pt.domain.element_count(); ++e) {
    const auto s = element_centroid_stress(pt.domain, 1.0, sol.displacements, e);
    EXPECT_NEAR(s[0], 1.0, 1e-8);
    EXPECT_NEAR(s[1], 0.0, 1e-8);
    EXPECT_NEAR(s[2], 0.0, 1e-8);
  }
  const auto vm = von_mises_field(pt.domain, solid, 3.0, sol.displacements);
  for (double v : vm.values) EXPECT_NEAR(v, 1.0, 1e-8);
}

TEST(Solve, SolverBackendsAgree) {
  const auto d = small_domain(12, 10);
  std::mt19937_64 rng(11);
  const auto rho = topoforge::testing::random_density(d, rng, 0.2);
  const auto sys = assemble(d, rho, 3.0);
  const LoadSpec load{d.node_index(12, 5), 0.0, -1.0};
  const auto sup = left_edge_clamped(d);
  const auto dense = solve(sys, load, sup, {.kind = SolverKind::Dense});
  const auto chol = solve(sys, load, sup, {.kind = SolverKind::Cholesky});
  const auto pcg = solve(sys, load, sup, {.kind = SolverKind::Pcg, .tol = 1e-12});
  EXPECT_NEAR(chol.compliance, dense.compliance, 1e-9 * dense.compliance);
  EXPECT_NEAR(pcg.compliance, dense.compliance, 1e-8 * dense.compliance);
  EXPECT_GT(pcg.iterations, 0);
}

TEST(Solve, ReportsSingularSupports) {
  const auto d = small_domain(4, 4);
  const auto sys = assemble(d, DensityField(4, 4, 1.0), 3.0);
  const LoadSpec load{d.node_index(4, 4), 1.0, 0.0};
  try {
    solve(sys, load, Supports::from_dofs({0, 1}));
    FAIL() << "expected singular error";
  } catch (const FeaError& e) {
    EXPECT_EQ(e.kind(), FeaError::Kind::Singular);
  }
  EXPECT_THROW(solve(sys, load, Supports{}), FeaError);
}

TEST(Solve, ReportsNonConvergenceWithResidual) {
  const auto d = small_domain(8, 8);
  const auto sys = assemble(d, DensityField(8, 8, 1.0), 3.0);
  try {
    solve(sys, LoadSpec{d.node_index(8, 4), 0.0, -1.0}, left_edge_clamped(d),
          {.kind = SolverKind::Pcg, .tol = 1e-12, .max_iterations = 2});
    FAIL() << "expected non-convergence";
  } catch (const FeaError& e) {
    EXPECT_EQ(e.kind(), FeaError::Kind::NotConverged);
    EXPECT_GT(e.residual(), 1e-12);
  }
}

TEST(Solve, ComplianceIdentitiesOnRandomProblems) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const auto d = small_domain(6, 5);
    const auto rho = topoforge::testing::random_density(d, rng, 0.05);
    const auto sys = assemble(d, rho, 3.0);
    std::uniform_real_distribution<double> angle(0.0, 2 * M_PI);
    const double th = angle(rng);
    const auto sol = solve(sys, LoadSpec{d.node_index(6, 3), std::cos(th), std::sin(th)},
                           left_edge_clamped(d));
    Eigen::Map<const Eigen::VectorXd> u(sol.displacements.data(), d.dof_count());
    const double utku = u.dot(sys.K * u);
    EXPECT_GT(sol.compliance, 0.0);
    EXPECT_NEAR(sol.compliance, utku, 1e-8 * utku);
    double scaled = 0.0;
    for (int e = 0; e < d.element_count(); ++e) scaled += sys.moduli[e] * sol.element_energies[e];
    EXPECT_NEAR(sol.compliance, scaled, 1e-8 * scaled);
  }
}

TEST(Solve, AddingMaterialNeverIncreasesCompliance) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> pick(0, 15);
  std::uniform_real_distribution<double> bump(0.0, 1.0);
  const auto d = small_domain(4, 4);
  const auto sup = left_edge_clamped(d);
  const LoadSpec load{d.node_index(4, 2), 0.0, -1.0};
  for (int trial = 0; trial < 50; ++trial) {
    auto rho = topoforge::testing::random_density(d, rng, 0.01);
    const double c0 = solve(assemble(d, rho, 3.0), load, sup).compliance;
    const int e = pick(rng);
    rho.values[e] += (1.0 - rho.values[e]) * bump(rng);
    const double c1 = solve(assemble(d, rho, 3.0), load, sup).compliance;
    EXPECT_LE(c1, c0 * (1.0 + 1e-10));
  }
}

TEST(Fields, ZeroDisplacementGivesZeroFields) {
  const auto d = small_domain(3, 3);
  const std::vector<double> u(d.dof_count(), 0.0);
  const DensityField solid(3, 3, 1.0);
  for (double v : von_mises_field(d, solid, 3.0, u).values) EXPECT_EQ(v, 0.0);
  for (double v : strain_energy_density_field(d, solid, 3.0, u).values) EXPECT_EQ(v, 0.0);
}

TEST(Fields, UniaxialStressVonMisesIsAbsoluteValue) {
  // Single element under a prescribed uniaxial strain producing sxx = s.
  const auto d = small_domain(1, 1);
  const double s = -2.5;
  const double exx = s / d.E0, eyy = -d.nu * exx;
  std::vector<double> u(d.dof_count(), 0.0);
  for (int j = 0; j <= 1; ++j)
    for (int i = 0; i <= 1; ++i) {
      u[2 * d.node_index(i, j)] = exx * i;
      u[2 * d.node_index(i, j) + 1] = eyy * j;
    }
  const auto vm = von_mises_field(d, DensityField(1, 1, 1.0), 3.0, u);
  EXPECT_NEAR(vm.values[0], std::abs(s), 1e-12);
}

TEST(Fields, StrainEnergyIsQuadraticInDisplacement) {
  const auto d = small_domain(5, 5);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  std::vector<double> u(d.dof_count()), u2(d.dof_count());
  for (std::size_t k = 0; k < u.size(); ++k) {
    u[k] = n01(rng);
    u2[k] = 2.0 * u[k];
  }
  const DensityField solid(5, 5, 1.0);
  const auto a = strain_energy_density_field(d, solid, 3.0, u);
  const auto b = strain_energy_density_field(d, solid, 3.0, u2);
  for (std::size_t e = 0; e < a.size(); ++e) EXPECT_NEAR(b.values[e], 4.0 * a.values[e], 1e-12 * b.values[e]);
}

TEST(Fields, StrainEnergySumsToHalfCompliance) {
  const auto d = small_domain(8, 8);
  std::mt19937_64 rng(8);
  const auto rho = topoforge::testing::random_density(d, rng, 0.1);
  const auto sys = assemble(d, rho, 3.0);
  const auto sol = solve(sys, LoadSpec{d.node_index(8, 8), 0.6, -0.8}, left_edge_clamped(d));
  const auto sed = strain_energy_density_field(d, rho, 3.0, sol.displacements);
  double total = 0.0;
  for (double v : sed.values) total += v * d.elem_size * d.elem_size * d.thickness;
  EXPECT_NEAR(total, 0.5 * sol.compliance, 1e-6 * sol.compliance);
}

TEST(Fields, DimensionChecks) {
  const auto d = small_domain(3, 3);
  EXPECT_THROW(von_mises_field(d, DensityField(3, 3, 1.0), 3.0, std::vector<double>(5)),
               std::invalid_argument);
  EXPECT_THROW(strain_energy_density_field(d, DensityField(2, 3, 1.0), 3.0,
                                           std::vector<double>(d.dof_count())),
               std::invalid_argument);
}

TEST(RigidBody, DetectsUnderConstrainedSupports) {
  const auto d = small_domain(4, 4);
  EXPECT_FALSE(constrains_rigid_body_modes(d, Supports::from_dofs({0, 1})));
  EXPECT_TRUE(constrains_rigid_body_modes(d, Supports::from_dofs({0, 1, 2 * 4 + 1})));
  EXPECT_TRUE(constrains_rigid_body_modes(d, left_edge_clamped(d)));
  // x-rollers on a vertical line cannot stop vertical translation.
  std::vector<int> rollers;
  for (int j = 0; j <= 4; ++j) rollers.push_back(2 * d.node_index(0, j));
  EXPECT_FALSE(constrains_rigid_body_modes(d, Supports::from_dofs(rollers)));
}
