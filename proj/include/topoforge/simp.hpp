#pragma once

// SIMP compliance minimization: sensitivities, sensitivity filtering and the
// optimality-criteria update with bisection on the volume multiplier.

#include <functional>
#include <stdexcept>
#include <vector>

#include "topoforge/fem.hpp"
#include "topoforge/problem.hpp"

namespace topoforge::simp {

struct SimpConfig {
  double penalization = 3.0;
  int max_iters = 100;
  double move_limit = 0.2;
  double damping = 0.5;
  double filter_radius = 1.5;
  double bisection_tol = 1e-4;
  double lambda_lo = 1e-9;
  double lambda_hi = 1e9;
  int max_bisections = 200;
  double rho_min = 1e-3;
  // Stop once |C_k - C_{k-1}| / C_k drops below early_stop_tol. Off by default.
  bool early_stop = false;
  double early_stop_tol = 1e-4;
  // Backtrack the OC step along rho + a (rho_oc - rho), a = 1, 1/2, ..., when
  // the new design would raise compliance; if every trial raises it the design
  // is kept and the run is frozen. Volume and move limits hold for any a.
  bool monotone_safeguard = true;
  int safeguard_backtracks = 4;
  fem::SolverOptions solver{};

  void validate() const;
};

struct OptimizationTrace {
  std::vector<double> compliance_history;  // compliance of the design analysed at iteration k
  std::vector<double> volume_history;      // mean density after the update of iteration k
  fem::DensityField final_density;
  double initial_compliance = 0.0;
  double final_compliance = 0.0;
  int iterations_run = 0;
  int frozen_at = 0;  // iteration at which the safeguard froze the design, 0 if never
  bool cancelled = false;
};

class BisectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class OptimizationError : public std::runtime_error {
 public:
  OptimizationError(int iteration, const std::string& what)
      : std::runtime_error("SIMP iteration " + std::to_string(iteration) + ": " + what),
        iteration_(iteration) {}
  int iteration() const { return iteration_; }

 private:
  int iteration_;
};

// dC/drho_e = -p rho_e^(p-1) (E0 - Emin) u_e^T k_unit u_e.
std::vector<double> sensitivities(const fem::DesignDomain& domain, const fem::DensityField& rho,
                                  const fem::FeaSolution& solution, double p);

// Distance-weighted sensitivity filter with precomputed neighbour weights.
class SensitivityFilter {
 public:
  SensitivityFilter(int nx, int ny, double rmin);
  std::vector<double> apply(const fem::DensityField& rho, const std::vector<double>& dc) const;

 private:
  struct Neighbor {
    int index;
    double weight;
  };
  int nx_, ny_;
  std::vector<std::vector<Neighbor>> neighbors_;
};

std::vector<double> filter_sensitivities(const fem::DesignDomain& domain, const fem::DensityField& rho,
                                         const std::vector<double>& dc, double rmin);

// Densities after one OC step for a fixed multiplier (no volume enforcement).
fem::DensityField oc_candidate(const fem::DensityField& rho, const std::vector<double>& dc_filtered,
                               double lambda, const SimpConfig& cfg);

struct OcResult {
  fem::DensityField density;
  double lambda = 0.0;
  int bisections = 0;
};

// Bisects lambda in log space until |mean(rho_new) - f| <= cfg.bisection_tol.
// Throws BisectionError when the bracket does not contain the target.
OcResult oc_update(const fem::DensityField& rho, const std::vector<double>& dc_filtered, double f,
                   const SimpConfig& cfg);

struct IterationInfo {
  int iteration = 0;  // 1-based
  double compliance = 0.0;
  double volume = 0.0;
  const fem::DensityField* density = nullptr;
};

// Return false to cancel between iterations.
using IterationObserver = std::function<bool(const IterationInfo&)>;

OptimizationTrace optimize(const Problem& problem, const SimpConfig& cfg,
                           const IterationObserver& observer = {});

fem::DensityField binarize(const fem::DensityField& rho, double threshold = 0.5);

}  // namespace topoforge::simp
