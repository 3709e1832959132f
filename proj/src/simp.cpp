#include "topoforge/simp.hpp"

#include <algorithm>
#include <cmath>

namespace topoforge::simp {

void SimpConfig::validate() const {
  if (penalization < 1.0) throw std::invalid_argument("penalization must be >= 1");
  if (max_iters < 0) throw std::invalid_argument("max_iters must be >= 0");
  if (!(move_limit > 0.0 && move_limit <= 1.0)) throw std::invalid_argument("move limit must lie in (0, 1]");
  if (!(damping > 0.0 && damping <= 1.0)) throw std::invalid_argument("damping must lie in (0, 1]");
  if (filter_radius < 1.0) throw std::invalid_argument("filter radius must be >= 1");
  if (!(bisection_tol > 0.0)) throw std::invalid_argument("bisection tolerance must be positive");
  if (!(lambda_lo > 0.0 && lambda_lo < lambda_hi)) throw std::invalid_argument("need 0 < lambda_lo < lambda_hi");
  if (!(rho_min > 0.0 && rho_min < 1.0)) throw std::invalid_argument("rho_min must lie in (0, 1)");
}

std::vector<double> sensitivities(const fem::DesignDomain& domain, const fem::DensityField& rho,
                                  const fem::FeaSolution& solution, double p) {
  if (solution.element_energies.size() != rho.size())
    throw std::invalid_argument("solution does not match the density field");
  std::vector<double> dc(rho.size());
  const double range = domain.E0 - domain.Emin;
  for (std::size_t e = 0; e < rho.size(); ++e)
    dc[e] = -p * std::pow(rho.values[e], p - 1.0) * range * solution.element_energies[e];
  return dc;
}

SensitivityFilter::SensitivityFilter(int nx, int ny, double rmin) : nx_(nx), ny_(ny) {
  if (rmin < 1.0) throw std::invalid_argument("filter radius must be >= 1");
  const int reach = static_cast<int>(std::ceil(rmin)) - 1;
  neighbors_.resize(static_cast<std::size_t>(nx) * ny);
  for (int r = 0; r < ny; ++r) {
    for (int c = 0; c < nx; ++c) {
      auto& list = neighbors_[static_cast<std::size_t>(r) * nx + c];
      for (int rr = std::max(r - reach, 0); rr <= std::min(r + reach, ny - 1); ++rr)
        for (int cc = std::max(c - reach, 0); cc <= std::min(c + reach, nx - 1); ++cc) {
          const double w = rmin - std::hypot(c - cc, r - rr);
          if (w > 0.0) list.push_back({rr * nx + cc, w});
        }
    }
  }
}

std::vector<double> SensitivityFilter::apply(const fem::DensityField& rho, const std::vector<double>& dc) const {
  if (rho.nx != nx_ || rho.ny != ny_ || dc.size() != rho.size())
    throw std::invalid_argument("filter dimensions do not match");
  std::vector<double> out(dc.size());
  for (std::size_t e = 0; e < dc.size(); ++e) {
    double num = 0.0, wsum = 0.0;
    for (const auto& nb : neighbors_[e]) {
      num += nb.weight * rho.values[nb.index] * dc[nb.index];
      wsum += nb.weight;
    }
    out[e] = num / (std::max(rho.values[e], 1e-3) * wsum);
  }
  return out;
}

std::vector<double> filter_sensitivities(const fem::DesignDomain& domain, const fem::DensityField& rho,
                                         const std::vector<double>& dc, double rmin) {
  return SensitivityFilter(domain.nx, domain.ny, rmin).apply(rho, dc);
}

fem::DensityField oc_candidate(const fem::DensityField& rho, const std::vector<double>& dc_filtered,
                               double lambda, const SimpConfig& cfg) {
  fem::DensityField out(rho.nx, rho.ny);
  for (std::size_t e = 0; e < rho.size(); ++e) {
    const double x = rho.values[e];
    const double be = x * std::pow(std::max(-dc_filtered[e], 0.0) / lambda, cfg.damping);
    const double lo = std::max(x - cfg.move_limit, 0.0);
    const double hi = std::min(x + cfg.move_limit, 1.0);
    out.values[e] = std::max(cfg.rho_min, std::clamp(be, lo, hi));
  }
  return out;
}

OcResult oc_update(const fem::DensityField& rho, const std::vector<double>& dc_filtered, double f,
                   const SimpConfig& cfg) {
  if (dc_filtered.size() != rho.size()) throw std::invalid_argument("sensitivity length mismatch");
  if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("target volume fraction must lie in (0, 1]");

  double lo = cfg.lambda_lo, hi = cfg.lambda_hi;
  OcResult best{oc_candidate(rho, dc_filtered, lo, cfg), lo, 0};
  double best_err = std::abs(best.density.mean() - f);
  const double mean_lo = best.density.mean();
  const double mean_hi = oc_candidate(rho, dc_filtered, hi, cfg).mean();
  if (mean_lo < f - cfg.bisection_tol || mean_hi > f + cfg.bisection_tol)
    throw BisectionError("volume target " + std::to_string(f) + " outside bracket [" +
                         std::to_string(mean_hi) + ", " + std::to_string(mean_lo) +
                         "] reachable under the move limit");

  const double target = 1e-3 * cfg.bisection_tol;
  int k = 0;
  while (best_err > target && k < cfg.max_bisections && hi / lo - 1.0 > 1e-15) {
    ++k;
    const double mid = std::sqrt(lo * hi);
    auto cand = oc_candidate(rho, dc_filtered, mid, cfg);
    const double m = cand.mean();
    const double err = std::abs(m - f);
    if (err < best_err) {
      best_err = err;
      best = OcResult{std::move(cand), mid, k};
    }
    if (m > f) lo = mid;
    else hi = mid;
  }
  best.bisections = k;
  if (best_err > cfg.bisection_tol)
    throw BisectionError("bisection ended with volume error " + std::to_string(best_err));
  return best;
}

OptimizationTrace optimize(const Problem& problem, const SimpConfig& cfg, const IterationObserver& observer) {
  cfg.validate();
  problem.validate();
  const auto& domain = problem.domain;
  const double f = problem.volume_fraction;
  const double p = cfg.penalization;
  const SensitivityFilter filter(domain.nx, domain.ny, cfg.filter_radius);
  const auto force = fem::load_vector(domain, problem.load);

  auto analyse = [&](const fem::DensityField& rho, int iteration) {
    try {
      return fem::solve(fem::assemble(domain, rho, p), force, problem.supports, cfg.solver);
    } catch (const fem::FeaError& e) {
      throw OptimizationError(iteration, e.what());
    }
  };

  auto update = [&](const fem::DensityField& rho, const std::vector<double>& dc, int iteration) {
    try {
      return oc_update(rho, dc, f, cfg).density;
    } catch (const BisectionError&) {
      SimpConfig wide = cfg;
      wide.lambda_lo *= 1e-6;
      wide.lambda_hi *= 1e6;
      try {
        return oc_update(rho, dc, f, wide).density;
      } catch (const BisectionError& e) {
        throw OptimizationError(iteration, e.what());
      }
    }
  };

  OptimizationTrace trace;
  fem::DensityField rho(domain.nx, domain.ny, f);
  auto sol = analyse(rho, 1);
  trace.initial_compliance = sol.compliance;
  double previous = 0.0;
  for (int it = 1; it <= cfg.max_iters; ++it) {
    const double compliance = sol.compliance;
    if (trace.frozen_at == 0) {
      const auto dc = filter.apply(rho, sensitivities(domain, rho, sol, p));
      const auto target = update(rho, dc, it);
      auto cand = target;
      auto cand_sol = analyse(cand, it + 1);
      if (cfg.monotone_safeguard) {
        double step = 1.0;
        for (int b = 0; b < cfg.safeguard_backtracks && cand_sol.compliance > compliance; ++b) {
          step *= 0.5;
          for (std::size_t e = 0; e < cand.size(); ++e)
            cand.values[e] = rho.values[e] + step * (target.values[e] - rho.values[e]);
          cand_sol = analyse(cand, it + 1);
        }
        if (cand_sol.compliance > compliance) {
          trace.frozen_at = it;
          cand = rho;
          cand_sol = sol;
        }
      }
      rho = std::move(cand);
      sol = std::move(cand_sol);
    }
    trace.compliance_history.push_back(compliance);
    trace.volume_history.push_back(rho.mean());
    trace.iterations_run = it;

    if (observer && !observer(IterationInfo{it, compliance, rho.mean(), &rho})) {
      trace.cancelled = true;
      break;
    }
    if (cfg.early_stop && it > 1 && std::abs(compliance - previous) / compliance < cfg.early_stop_tol) break;
    previous = compliance;
  }

  trace.final_compliance = sol.compliance;
  trace.final_density = std::move(rho);
  return trace;
}

fem::DensityField binarize(const fem::DensityField& rho, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must lie in (0, 1)");
  fem::DensityField out(rho.nx, rho.ny);
  for (std::size_t e = 0; e < rho.size(); ++e) out.values[e] = rho.values[e] > threshold ? 1.0 : 0.0;
  return out;
}

}  // namespace topoforge::simp
