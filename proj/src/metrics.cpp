#include "topoforge/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

namespace topoforge::metrics {

namespace {

void check_grid(const fem::DensityField& rho, const Problem& problem) {
  if (rho.nx != problem.domain.nx || rho.ny != problem.domain.ny ||
      rho.values.size() != static_cast<std::size_t>(rho.nx) * rho.ny)
    throw std::invalid_argument("topology grid does not match the problem domain");
}

bool solid(const fem::DensityField& rho, int e) { return rho.values[e] > 0.5; }

// Union-find with path halving; union by index keeps it deterministic.
struct DisjointSet {
  std::vector<int> parent;
  explicit DisjointSet(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) {
    a = find(a), b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

fem::DensityField binary_copy(const fem::DensityField& rho) {
  fem::DensityField out(rho.nx, rho.ny);
  for (std::size_t e = 0; e < rho.size(); ++e) out.values[e] = rho.values[e] > 0.5 ? 1.0 : 0.0;
  return out;
}

fem::FeaSolution analyse(const fem::DensityField& binary, const Problem& problem) {
  return fem::solve(fem::assemble(problem.domain, binary, 1.0), problem.load, problem.supports);
}

PeakResponse peaks(const fem::DesignDomain& domain, const fem::DensityField& binary, const fem::FeaSolution& sol) {
  const auto vm = fem::von_mises_field(domain, binary, 1.0, sol.displacements);
  const auto sed = fem::strain_energy_density_field(domain, binary, 1.0, sol.displacements);
  PeakResponse p;
  for (std::size_t e = 0; e < binary.size(); ++e)
    if (binary.values[e] > 0.5) {
      p.von_mises = std::max(p.von_mises, vm.values[e]);
      p.strain_energy_density = std::max(p.strain_energy_density, sed.values[e]);
    }
  return p;
}

std::string csv_double(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

}  // namespace

Components solid_components(const fem::DensityField& rho) {
  const int nx = rho.nx, ny = rho.ny;
  DisjointSet ds(nx * ny);
  for (int r = 0; r < ny; ++r)
    for (int c = 0; c < nx; ++c) {
      const int e = r * nx + c;
      if (!solid(rho, e)) continue;
      // Already-visited neighbours: W, SW, S, SE.
      const int dc[] = {-1, -1, 0, 1}, dr[] = {0, -1, -1, -1};
      for (int k = 0; k < 4; ++k) {
        const int cc = c + dc[k], rr = r + dr[k];
        if (cc >= 0 && cc < nx && rr >= 0 && solid(rho, rr * nx + cc)) ds.unite(e, rr * nx + cc);
      }
    }
  Components out;
  out.label.assign(static_cast<std::size_t>(nx) * ny, -1);
  std::vector<int> root_label(static_cast<std::size_t>(nx) * ny, -1);
  for (int e = 0; e < nx * ny; ++e) {
    if (!solid(rho, e)) continue;
    const int root = ds.find(e);
    if (root_label[root] < 0) root_label[root] = out.count++;
    out.label[e] = root_label[root];
  }
  return out;
}

std::vector<int> support_adjacent_elements(const Problem& problem) {
  std::vector<int> out;
  int last_node = -1;
  for (int dof : problem.supports.fixed_dofs) {
    const int node = dof / 2;
    if (node == last_node) continue;
    last_node = node;
    for (int e : problem.domain.elements_adjacent_to_node(node)) out.push_back(e);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<int> load_adjacent_elements(const Problem& problem) {
  return problem.domain.elements_adjacent_to_node(problem.load.node);
}

double volume_fraction_error_pct(const fem::DensityField& binary, double f) {
  return std::abs(volume_fraction_signed_pct(binary, f));
}

double volume_fraction_signed_pct(const fem::DensityField& binary, double f) {
  std::size_t n = 0;
  for (double v : binary.values) n += v > 0.5;
  return 100.0 * (static_cast<double>(n) / static_cast<double>(binary.size()) - f);
}

bool load_discrepancy(const fem::DensityField& rho, const Problem& problem) {
  check_grid(rho, problem);
  const int nx = rho.nx, ny = rho.ny;
  for (int e : load_adjacent_elements(problem)) {
    const int c = e % nx, r = e / nx;
    for (int rr = std::max(r - 1, 0); rr <= std::min(r + 1, ny - 1); ++rr)
      for (int cc = std::max(c - 1, 0); cc <= std::min(c + 1, nx - 1); ++cc)
        if (solid(rho, rr * nx + cc)) return false;
  }
  return true;
}

bool floating_material(const fem::DensityField& rho, const Problem& problem) {
  check_grid(rho, problem);
  const auto comps = solid_components(rho);
  std::vector<char> anchored(comps.count, 0);
  for (const auto& list : {support_adjacent_elements(problem), load_adjacent_elements(problem)})
    for (int e : list)
      if (comps.label[e] >= 0) anchored[comps.label[e]] = 1;
  return std::find(anchored.begin(), anchored.end(), 0) != anchored.end();
}

double compliance(const fem::DensityField& binary, const Problem& problem) {
  check_grid(binary, problem);
  return analyse(binary_copy(binary), problem).compliance;
}

double compliance_error_pct(const fem::DensityField& gen, const fem::DensityField& gt, const Problem& problem) {
  const double cg = compliance(gen, problem), ct = compliance(gt, problem);
  return 100.0 * (cg - ct) / ct;
}

PeakResponse peak_response(const fem::DensityField& topology, const Problem& problem) {
  check_grid(topology, problem);
  const auto binary = binary_copy(topology);
  return peaks(problem.domain, binary, analyse(binary, problem));
}

PeakResponse peak_response(const fem::DensityField& topology, const fem::DesignDomain& domain,
                           const fem::Supports& supports, std::span<const double> force) {
  if (topology.nx != domain.nx || topology.ny != domain.ny)
    throw std::invalid_argument("topology grid does not match the domain");
  const auto binary = binary_copy(topology);
  return peaks(domain, binary, fem::solve(fem::assemble(domain, binary, 1.0), force, supports));
}

SampleEvaluation evaluate_sample(const fem::DensityField& generated, const fem::DensityField& ground_truth,
                                 const Problem& problem, std::int64_t index) {
  check_grid(generated, problem);
  check_grid(ground_truth, problem);
  const auto gen = binary_copy(generated), gt = binary_copy(ground_truth);
  SampleEvaluation ev;
  ev.index = index;
  ev.vf_signed_pct = volume_fraction_signed_pct(gen, problem.volume_fraction);
  ev.vf_error_pct = std::abs(ev.vf_signed_pct);
  ev.load_discrepant = load_discrepancy(gen, problem);
  ev.floating = floating_material(gen, problem);
  try {
    const auto sol_gen = analyse(gen, problem), sol_gt = analyse(gt, problem);
    ev.compliance_gen = sol_gen.compliance;
    ev.compliance_gt = sol_gt.compliance;
    if (!(ev.compliance_gt > 0.0) || !std::isfinite(ev.compliance_gen))
      throw fem::FeaError(fem::FeaError::Kind::Singular, "degenerate ground-truth compliance");
    ev.compliance_error_pct = 100.0 * (ev.compliance_gen - ev.compliance_gt) / ev.compliance_gt;
    ev.abs_compliance_error_pct = std::abs(ev.compliance_error_pct);
    const auto pg = peaks(problem.domain, gen, sol_gen), pt = peaks(problem.domain, gt, sol_gt);
    ev.peak_stress_gen = pg.von_mises;
    ev.peak_stress_gt = pt.von_mises;
    ev.peak_strain_energy_gen = pg.strain_energy_density;
    ev.peak_strain_energy_gt = pt.strain_energy_density;
  } catch (const fem::FeaError& e) {
    ev.solvable = false;
    ev.note = e.what();
    ev.compliance_gen = ev.compliance_gt = ev.compliance_error_pct = ev.abs_compliance_error_pct = 0.0;
  }
  return ev;
}

SuiteReport summarize(std::vector<SampleEvaluation> samples) {
  SuiteReport r;
  r.size = samples.size();
  std::vector<double> errs;
  std::size_t above = 0, load = 0, floating = 0;
  double vf = 0;
  for (const auto& s : samples) {
    vf += s.vf_error_pct;
    load += s.load_discrepant;
    floating += s.floating;
    if (!s.solvable) continue;
    errs.push_back(s.abs_compliance_error_pct);
    above += s.abs_compliance_error_pct > 30.0;
  }
  r.solvable = errs.size();
  r.unsolvable = r.size - r.solvable;
  if (!errs.empty()) {
    r.mean_abs_compliance_error = std::accumulate(errs.begin(), errs.end(), 0.0) / static_cast<double>(errs.size());
    std::sort(errs.begin(), errs.end());
    const std::size_t m = errs.size() / 2;
    r.median_abs_compliance_error = errs.size() % 2 ? errs[m] : 0.5 * (errs[m - 1] + errs[m]);
    r.above_30_pct = 100.0 * static_cast<double>(above) / static_cast<double>(errs.size());
    r.median_above_mean = r.median_abs_compliance_error > r.mean_abs_compliance_error;
  }
  if (r.size) {
    const double n = static_cast<double>(r.size);
    r.mean_vf_error = vf / n;
    r.load_discrepancy_pct = 100.0 * static_cast<double>(load) / n;
    r.floating_pct = 100.0 * static_cast<double>(floating) / n;
  }
  r.samples = std::move(samples);
  return r;
}

SuiteReport evaluate_suite(const std::vector<fem::DensityField>& generated,
                           const std::vector<fem::DensityField>& ground_truth, const std::vector<Problem>& problems,
                           int threads) {
  if (generated.size() != ground_truth.size() || generated.size() != problems.size())
    throw std::invalid_argument("generated, ground-truth and problem lists must be aligned");
  std::vector<SampleEvaluation> out(generated.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < out.size();)
      out[i] = evaluate_sample(generated[i], ground_truth[i], problems[i], static_cast<std::int64_t>(i));
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(out.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return summarize(std::move(out));
}

std::vector<std::pair<std::string, double>> table_rows(const SuiteReport& r) {
  return {{"Compliance Error (%)", r.mean_abs_compliance_error},
          {"Compliance Error Above 30% (%)", r.above_30_pct},
          {"Median Compliance Error (%)", r.median_abs_compliance_error},
          {"Volume Fraction Error (%)", r.mean_vf_error},
          {"Load Discrepancy (%)", r.load_discrepancy_pct},
          {"Floating Material (%)", r.floating_pct}};
}

void write_samples_csv(std::ostream& out, const SuiteReport& r) {
  out << "index,solvable,compliance_gen,compliance_gt,compliance_error_pct,abs_compliance_error_pct,vf_error_pct,"
         "vf_signed_pct,load_discrepant,floating,peak_stress_gen,peak_stress_gt,peak_strain_energy_gen,"
         "peak_strain_energy_gt\n";
  for (const auto& s : r.samples)
    out << s.index << ',' << s.solvable << ',' << csv_double(s.compliance_gen) << ',' << csv_double(s.compliance_gt)
        << ',' << csv_double(s.compliance_error_pct) << ',' << csv_double(s.abs_compliance_error_pct) << ','
        << csv_double(s.vf_error_pct) << ',' << csv_double(s.vf_signed_pct) << ',' << s.load_discrepant << ','
        << s.floating << ',' << csv_double(s.peak_stress_gen) << ',' << csv_double(s.peak_stress_gt) << ','
        << csv_double(s.peak_strain_energy_gen) << ',' << csv_double(s.peak_strain_energy_gt) << '\n';
}

void write_summary_csv(std::ostream& out, const SuiteReport& r) {
  out << "metric,value,metrics_version\n";
  for (const auto& [name, value] : table_rows(r)) out << '"' << name << "\"," << csv_double(value) << ',' << kMetricsVersion << '\n';
}

void write_scatter_csv(std::ostream& out, const SuiteReport& r) {
  out << "index,compliance_error_pct,vf_signed_pct,peak_stress_gen,peak_stress_gt,peak_strain_energy_gen,"
         "peak_strain_energy_gt\n";
  for (const auto& s : r.samples) {
    if (!s.solvable) continue;
    out << s.index << ',' << csv_double(s.compliance_error_pct) << ',' << csv_double(s.vf_signed_pct) << ','
        << csv_double(s.peak_stress_gen) << ',' << csv_double(s.peak_stress_gt) << ','
        << csv_double(s.peak_strain_energy_gen) << ',' << csv_double(s.peak_strain_energy_gt) << '\n';
  }
}

}  // namespace topoforge::metrics
