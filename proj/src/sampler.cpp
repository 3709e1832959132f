#include "topoforge/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <thread>

#include <nlohmann/json.hpp>

namespace topoforge::sampler {

namespace {

std::vector<AnchorSpec> build_catalog() {
  using S = AnchorSite;
  std::vector<AnchorSpec> out;
  for (S s : {S::CornerBottomLeft, S::CornerBottomRight, S::CornerTopRight, S::CornerTopLeft})
    out.push_back(AnchorSpec::point(s));
  for (S s : {S::MidBottom, S::MidRight, S::MidTop, S::MidLeft}) out.push_back(AnchorSpec::point(s));
  // Per edge: corner-mid, mid-corner, corner-corner.
  const S edges[4][3] = {{S::CornerBottomLeft, S::MidBottom, S::CornerBottomRight},
                         {S::CornerBottomRight, S::MidRight, S::CornerTopRight},
                         {S::CornerTopRight, S::MidTop, S::CornerTopLeft},
                         {S::CornerTopLeft, S::MidLeft, S::CornerBottomLeft}};
  for (const auto& e : edges) {
    out.push_back(AnchorSpec::segment(e[0], e[1]));
    out.push_back(AnchorSpec::segment(e[1], e[2]));
    out.push_back(AnchorSpec::segment(e[0], e[2]));
  }
  return out;
}

AnchorSpec draw_anchor(Rng& rng) {
  const auto& cat = anchor_catalog();
  switch (rng.below(3)) {
    case 0: return cat[rng.below(4)];
    case 1: return cat[4 + rng.below(4)];
    default: return cat[8 + rng.below(12)];
  }
}

dataset::Sample to_sample(const Problem& p, const fem::DensityField& topology, const fem::ScalarField& vm,
                          const fem::ScalarField& sed) {
  dataset::Sample s(p.domain.nx, p.domain.ny);
  for (std::size_t e = 0; e < s.cells(); ++e) {
    s.topology[e] = static_cast<float>(topology.values[e]);
    s.stress[e] = static_cast<float>(vm.values[e]);
    s.strain_energy[e] = static_cast<float>(sed.values[e]);
  }
  s.load_x = static_cast<float>(p.load_x());
  s.load_y = static_cast<float>(p.load_y());
  s.fx = static_cast<float>(p.load.fx);
  s.fy = static_cast<float>(p.load.fy);
  s.volume_fraction = static_cast<float>(p.volume_fraction);
  s.seed = p.seed;
  return s;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw dataset::DatasetError("failed to write " + path);
}

}  // namespace

const std::vector<AnchorSpec>& anchor_catalog() {
  static const std::vector<AnchorSpec> catalog = build_catalog();
  return catalog;
}

SampledProblem sample_problem_detailed(std::uint64_t seed, const SamplerConfig& cfg) {
  fem::DesignDomain domain;
  domain.nx = cfg.nx;
  domain.ny = cfg.ny;
  domain.validate();
  if (!(cfg.f_lo > 0 && cfg.f_lo <= cfg.f_hi && cfg.f_hi < 1))
    throw std::invalid_argument("need 0 < f_lo <= f_hi < 1");

  Rng rng(seed);
  const int k = 1 + rng.below(4);
  for (int attempt = 0; attempt <= cfg.max_rejections; ++attempt) {
    std::vector<AnchorSpec> anchors;
    while (static_cast<int>(anchors.size()) < k) {
      const auto a = draw_anchor(rng);
      if (std::find(anchors.begin(), anchors.end(), a) == anchors.end()) anchors.push_back(a);
    }
    const auto supports = supports_from_anchors(domain, anchors);
    std::vector<int> candidates;
    for (int n = 0; n < domain.node_count(); ++n)
      if (domain.is_boundary_node(n) && !supports.is_fixed(2 * n) && !supports.is_fixed(2 * n + 1))
        candidates.push_back(n);
    // Draw load and f even for rejected anchor sets so the stream layout
    // does not depend on the solvability outcome.
    const int load_node = candidates.empty() ? -1 : candidates[rng.below(static_cast<int>(candidates.size()))];
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    const double f = rng.uniform(cfg.f_lo, cfg.f_hi);
    if (load_node < 0 || !fem::constrains_rigid_body_modes(domain, supports)) continue;

    SampledProblem out{make_problem(domain, std::move(anchors), load_node, angle, f, seed), attempt};
    out.problem.validate();
    return out;
  }
  throw SamplingError(seed, "no solvable configuration after " + std::to_string(cfg.max_rejections) +
                                " rejections");
}

Problem sample_problem(std::uint64_t seed, const SamplerConfig& cfg) {
  return sample_problem_detailed(seed, cfg).problem;
}

Problem problem_for_sample(const dataset::Sample& s, const SamplerConfig& base) {
  SamplerConfig cfg = base;
  cfg.nx = s.nx;
  cfg.ny = s.ny;
  Problem p = sample_problem(s.seed, cfg);
  const double load_tol = 1e-6;
  if (std::abs(p.load_x() - s.load_x) > load_tol || std::abs(p.load_y() - s.load_y) > load_tol ||
      std::abs(p.load.fx - s.fx) > load_tol || std::abs(p.load.fy - s.fy) > load_tol)
    throw std::invalid_argument("record with seed " + std::to_string(s.seed) +
                                " does not match the sampler's problem for that seed");
  p.volume_fraction = s.volume_fraction;
  return p;
}

std::pair<fem::ScalarField, fem::ScalarField> conditioning_fields(const Problem& problem,
                                                                  const fem::SolverOptions& opts) {
  const fem::DensityField solid(problem.domain.nx, problem.domain.ny, 1.0);
  const auto sol = fem::solve(fem::assemble(problem.domain, solid, 1.0), problem.load, problem.supports, opts);
  return {fem::von_mises_field(problem.domain, solid, 1.0, sol.displacements),
          fem::strain_energy_density_field(problem.domain, solid, 1.0, sol.displacements)};
}

GeneratedSample generate_sample(const Problem& problem, const simp::SimpConfig& cfg) {
  try {
    const auto trace = simp::optimize(problem, cfg);
    const auto topology = simp::binarize(trace.final_density, 0.5);
    const auto [vm, sed] = conditioning_fields(problem, cfg.solver);
    return {to_sample(problem, topology, vm, sed), trace.final_compliance};
  } catch (const SamplingError&) {
    throw;
  } catch (const std::exception& e) {
    throw SamplingError(problem.seed, e.what());
  }
}

void split_indices(std::uint64_t n, std::vector<std::uint64_t>& train, std::vector<std::uint64_t>& validation) {
  train.clear();
  validation.clear();
  const std::uint64_t n_train = n - n / 10;
  for (std::uint64_t i = 0; i < n; ++i) (i < n_train ? train : validation).push_back(i);
}

DatasetSummary generate_dataset(std::uint64_t n, std::uint64_t base_seed, const simp::SimpConfig& cfg,
                                const std::string& out_path, const DatasetOptions& opts) {
  if (n < 1) throw std::invalid_argument("dataset size must be >= 1");
  namespace fs = std::filesystem;
  const std::string partial = out_path + ".partial";
  const std::string split_path = out_path + ".split.json";
  const std::string summary_path = out_path + ".summary.json";

  struct Slot {
    std::optional<GeneratedSample> sample;
    bool failed = false;
  };
  std::vector<std::optional<Slot>> slots(n);
  std::mutex mu;
  std::condition_variable cv;
  std::atomic<std::uint64_t> next{0};
  std::atomic<bool> abort{false};

  auto worker = [&] {
    for (;;) {
      const std::uint64_t i = next.fetch_add(1);
      if (i >= n || abort) return;
      Slot slot;
      try {
        const auto problem = sample_problem(base_seed + i, opts.sampler);
        slot.sample = generate_sample(problem, cfg);
      } catch (const std::exception&) {
        slot.failed = true;
      }
      {
        std::lock_guard lock(mu);
        slots[i] = std::move(slot);
      }
      cv.notify_all();
    }
  };

  const int threads = std::max(1, opts.threads);
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  auto join_all = [&] {
    for (auto& th : pool)
      if (th.joinable()) th.join();
  };

  DatasetSummary summary;
  summary.requested = n;
  try {
    dataset::DatasetWriter writer(partial, opts.sampler.nx, opts.sampler.ny);
    double compliance_sum = 0.0;
    for (std::uint64_t i = 0; i < n; ++i) {
      Slot slot;
      {
        std::unique_lock lock(mu);
        cv.wait(lock, [&] { return slots[i].has_value(); });
        slot = std::move(*slots[i]);
        slots[i].reset();
      }
      if (slot.failed) {
        ++summary.failures;
        summary.failed_seeds.push_back(base_seed + i);
      } else {
        writer.append(slot.sample->sample);
        compliance_sum += slot.sample->compliance;
      }
      if (opts.progress) opts.progress(i + 1, n);
    }
    writer.close();
    summary.written = writer.count();
    summary.mean_compliance = summary.written ? compliance_sum / static_cast<double>(summary.written) : 0.0;
    split_indices(summary.written, summary.train_indices, summary.validation_indices);

    nlohmann::ordered_json split;
    split["train"] = summary.train_indices;
    split["validation"] = summary.validation_indices;
    nlohmann::ordered_json info;
    info["requested"] = summary.requested;
    info["count"] = summary.written;
    info["failures"] = summary.failures;
    info["failed_seeds"] = summary.failed_seeds;
    info["mean_compliance"] = summary.mean_compliance;
    info["base_seed"] = base_seed;
    info["nx"] = opts.sampler.nx;
    info["ny"] = opts.sampler.ny;
    info["train"] = summary.train_indices.size();
    info["validation"] = summary.validation_indices.size();

    join_all();
    write_text_file(split_path, split.dump(2) + "\n");
    write_text_file(summary_path, info.dump(2) + "\n");
    fs::rename(partial, out_path);
  } catch (...) {
    abort = true;
    // Unblock workers waiting on nothing; they exit on the abort flag.
    join_all();
    std::error_code ec;
    fs::remove(partial, ec);
    fs::remove(split_path, ec);
    fs::remove(summary_path, ec);
    throw;
  }
  return summary;
}

}  // namespace topoforge::sampler
