#pragma once

// Random well-posed problems and batch production of optimized, conditioned
// samples.

#include <atomic>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "topoforge/dataset.hpp"
#include "topoforge/problem.hpp"
#include "topoforge/rng.hpp"
#include "topoforge/simp.hpp"

namespace topoforge::sampler {

struct SamplerConfig {
  int nx = 64;
  int ny = 64;
  double f_lo = 0.3;
  double f_hi = 0.5;
  int max_rejections = 100;
};

class SamplingError : public std::runtime_error {
 public:
  SamplingError(std::uint64_t seed, const std::string& what)
      : std::runtime_error("seed " + std::to_string(seed) + ": " + what), seed_(seed) {}
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
};

// Every anchor the sampler may draw: 4 corner points, 4 edge midpoints and
// the 12 segments joining two sites on one edge.
const std::vector<AnchorSpec>& anchor_catalog();

struct SampledProblem {
  Problem problem;
  int rejections = 0;
};

// k ~ U{1..4} distinct anchors (kind uniform, then site uniform within the
// kind), load node uniform over boundary nodes with no fixed DOF, angle
// U[0, 2pi), f ~ U[f_lo, f_hi]. Draws leaving a rigid-body mode free are
// redrawn with the same k.
SampledProblem sample_problem_detailed(std::uint64_t seed, const SamplerConfig& cfg = {});
Problem sample_problem(std::uint64_t seed, const SamplerConfig& cfg = {});

// Rebuilds the problem behind a stored record from its seed (records do not
// store anchors). The stored f wins; a load that does not match the
// regenerated one throws std::invalid_argument.
Problem problem_for_sample(const dataset::Sample& s, const SamplerConfig& base = {});

struct GeneratedSample {
  dataset::Sample sample;
  double compliance = 0.0;  // final compliance of the continuous design
};

// Optimize, binarize at 0.5 and attach von Mises / strain-energy fields of the
// full-material (rho = 1) design, stored raw.
GeneratedSample generate_sample(const Problem& problem, const simp::SimpConfig& cfg);

// Full-material conditioning fields for a problem.
std::pair<fem::ScalarField, fem::ScalarField> conditioning_fields(const Problem& problem,
                                                                  const fem::SolverOptions& opts = {});

struct DatasetOptions {
  SamplerConfig sampler{};
  int threads = 1;
  std::function<void(std::uint64_t done, std::uint64_t total)> progress;
};

struct DatasetSummary {
  std::uint64_t requested = 0;
  std::uint64_t written = 0;
  std::uint64_t failures = 0;
  double mean_compliance = 0.0;
  std::vector<std::uint64_t> failed_seeds;
  std::vector<std::uint64_t> train_indices;
  std::vector<std::uint64_t> validation_indices;
};

// Train / validation split by record index: the first n - n/10 records train.
void split_indices(std::uint64_t n, std::vector<std::uint64_t>& train, std::vector<std::uint64_t>& validation);

// Seeds base_seed .. base_seed + n - 1, written in seed order regardless of the
// worker count. Also writes <out>.split.json and <out>.summary.json. The data
// go to <out>.partial first and are renamed on success; any I/O failure
// removes the partial files.
DatasetSummary generate_dataset(std::uint64_t n, std::uint64_t base_seed, const simp::SimpConfig& cfg,
                                const std::string& out_path, const DatasetOptions& opts = {});

}  // namespace topoforge::sampler
