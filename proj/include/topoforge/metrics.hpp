#pragma once

// Evaluation of generated topologies against SIMP ground truth. Both
// topologies are binarized at 0.5 and analysed with void elements at Emin.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "topoforge/fem.hpp"
#include "topoforge/problem.hpp"

namespace topoforge::metrics {

// Stamped into every report: the load-discrepancy and floating-material rules
// below are local definitions, so results are only comparable within a version.
inline constexpr const char* kMetricsVersion = "topoforge-metrics-1";

// Solid element labels for 8-connected components (-1 for void), labels
// 0..count-1 in first-seen row-major order.
struct Components {
  std::vector<int> label;
  int count = 0;
};
Components solid_components(const fem::DensityField& binary);

// Elements touching a supported node, and elements touching the load node.
std::vector<int> support_adjacent_elements(const Problem& problem);
std::vector<int> load_adjacent_elements(const Problem& problem);

// Percentage points: 100 |mean - f| (absolute) and 100 (mean - f) (signed).
double volume_fraction_error_pct(const fem::DensityField& binary, double f);
double volume_fraction_signed_pct(const fem::DensityField& binary, double f);

// True when no solid element lies within Chebyshev distance 1 of any element
// adjacent to the load node.
bool load_discrepancy(const fem::DensityField& binary, const Problem& problem);

// True when some 8-connected solid component touches neither a supported
// node's element nor the load node's element.
bool floating_material(const fem::DensityField& binary, const Problem& problem);

// Compliance of the binarized design. Throws fem::FeaError when unsolvable.
double compliance(const fem::DensityField& binary, const Problem& problem);

// 100 (C_gen - C_gt) / C_gt.
double compliance_error_pct(const fem::DensityField& gen, const fem::DensityField& gt, const Problem& problem);

struct PeakResponse {
  double von_mises = 0.0;
  double strain_energy_density = 0.0;
};
// Maxima over solid elements of the binarized design; (0, 0) without solid.
PeakResponse peak_response(const fem::DensityField& topology, const Problem& problem);
// Same for an arbitrary nodal force vector (e.g. a distributed traction).
PeakResponse peak_response(const fem::DensityField& topology, const fem::DesignDomain& domain,
                           const fem::Supports& supports, std::span<const double> force);

struct SampleEvaluation {
  std::int64_t index = 0;
  bool solvable = true;
  double compliance_gen = 0, compliance_gt = 0;
  double compliance_error_pct = 0;      // signed
  double abs_compliance_error_pct = 0;  // |signed|
  double vf_error_pct = 0;              // absolute percentage points
  double vf_signed_pct = 0;
  bool load_discrepant = false;
  bool floating = false;
  double peak_stress_gen = 0, peak_stress_gt = 0;
  double peak_strain_energy_gen = 0, peak_strain_energy_gt = 0;
  std::string note;  // reason when unsolvable
};

// Binarizes both inputs at 0.5 first. FEA failures mark the sample unsolvable.
SampleEvaluation evaluate_sample(const fem::DensityField& generated, const fem::DensityField& ground_truth,
                                 const Problem& problem, std::int64_t index = 0);

struct SuiteReport {
  std::size_t size = 0, solvable = 0, unsolvable = 0;
  double mean_abs_compliance_error = 0;    // over solvable samples
  double median_abs_compliance_error = 0;  // over solvable samples
  double above_30_pct = 0;                 // share of solvable samples with |error| > 30%
  double mean_vf_error = 0;                // over all samples
  double load_discrepancy_pct = 0;
  double floating_pct = 0;
  bool median_above_mean = false;  // reported as a note: unusual for absolute errors
  std::vector<SampleEvaluation> samples;
};

SuiteReport summarize(std::vector<SampleEvaluation> samples);

// Evaluates aligned lists in parallel; results are ordered by index and do not
// depend on the thread count.
SuiteReport evaluate_suite(const std::vector<fem::DensityField>& generated,
                           const std::vector<fem::DensityField>& ground_truth, const std::vector<Problem>& problems,
                           int threads = 1);

// The six table rows, in order, with their values.
std::vector<std::pair<std::string, double>> table_rows(const SuiteReport& report);

void write_samples_csv(std::ostream& out, const SuiteReport& report);
// metric,value,metrics_version with exactly the six table rows.
void write_summary_csv(std::ostream& out, const SuiteReport& report);
// Signed compliance vs signed vf error and peak gen vs gt, per solvable sample.
void write_scatter_csv(std::ostream& out, const SuiteReport& report);

}  // namespace topoforge::metrics
