#include "topoforge/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "topoforge/checkpoint.hpp"
#include "topoforge/dataset.hpp"
#include "topoforge/diffusion.hpp"
#include "topoforge/dit.hpp"
#include "topoforge/dit_sample.hpp"
#include "topoforge/dit_train.hpp"
#include "topoforge/fem.hpp"
#include "topoforge/grid_io.hpp"
#include "topoforge/metrics.hpp"
#include "topoforge/rng.hpp"
#include "topoforge/sampler.hpp"
#include "topoforge/service.hpp"
#include "topoforge/simp.hpp"

namespace topoforge::cli {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Bad user input; everything else that escapes a command is a runtime failure.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

constexpr int kDiffusionSteps = 1000;
const std::vector<int> kTestedSteps = {1000, 250, 100, 25, 10, 5};

struct Globals {
  std::uint64_t seed = 0;
  int threads = 0;  // 0: TOPOFORGE_THREADS or 1
  std::string out;
};

struct OptimizeArgs {
  std::string problem = "cantilever";
  std::optional<double> vf;
  int iters = 100;
  int grid = 64;
  double penal = 3.0;
  double rmin = 1.5;
};

struct GenArgs {
  std::uint64_t n = 16;
  int grid = 64;
  int iters = 100;
};

struct TrainArgs {
  std::string dataset;
  std::string size = "tiny";
  int patch = 4;
  std::uint64_t steps = 1000;
  int batch = 16;
  double lr = 1e-4;
  std::string indices = "train";
  std::uint64_t checkpoint_every = 0;
  std::string resume;
  std::string log;
  bool log1p = false;
};

struct SampleArgs {
  std::string ckpt;
  std::string dataset;
  std::string indices = "all";
  int steps = 250;
  int batch = 16;
  bool allow_any_steps = false;
};

struct EvalArgs {
  std::string generated;
  std::string dataset;
};

struct StudyArgs {
  std::string ckpt;
  std::string dataset;
  std::string indices = "all";
  std::string steps_list = "1000,250,100,25,10,5";
  int batch = 16;
  bool allow_any_steps = false;
};

struct ServeArgs {
  int port = 7878;
  std::string host = "127.0.0.1";
  std::string checkpoint_dir = ".";
  int queue_width = 2;
};

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (requested < 0) throw UsageError("--threads must be positive");
  if (const char* env = std::getenv("TOPOFORGE_THREADS"); env && *env) {
    int v = 0;
    const auto [p, ec] = std::from_chars(env, env + std::strlen(env), v);
    if (ec != std::errc{} || *p != '\0' || v < 1) throw UsageError("TOPOFORGE_THREADS must be a positive integer");
    return v;
  }
  return 1;
}

std::string quote(const std::string& s) {
  if (!s.empty() && s.find_first_of(" \t\"'\\$") == std::string::npos) return s;
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

// Every option of an app with its resolved value, so the line reruns the exact configuration.
void append_options(std::string& line, const CLI::App* app) {
  for (const CLI::Option* opt : app->get_options()) {
    const std::string name = opt->get_name(false, true);
    if (name.empty() || opt == app->get_help_ptr() || name == "--config" || name == "--threads") continue;
    const std::string flag = opt->get_lnames().empty() ? name : "--" + opt->get_lnames().front();
    if (opt->get_expected_min() == 0) {
      if (opt->count()) line += " " + flag;
      continue;
    }
    std::string value;
    if (opt->count()) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
    }
    if (!value.empty()) line += " " + flag + " " + quote(value);
  }
}

std::vector<std::uint64_t> parse_indices(const std::string& spec, std::uint64_t n) {
  if (spec == "all") {
    std::vector<std::uint64_t> all(n);
    for (std::uint64_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  if (spec == "train" || spec == "validation") {
    std::vector<std::uint64_t> train, validation;
    sampler::split_indices(n, train, validation);
    return spec == "train" ? train : validation;
  }
  auto number = [&](const std::string& s) {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || p != s.data() + s.size())
      throw UsageError("bad index '" + s + "' in --indices " + spec);
    return v;
  };
  std::vector<std::uint64_t> out;
  std::stringstream ss(spec);
  for (std::string part; std::getline(ss, part, ',');) {
    if (const auto colon = part.find(':'); colon != std::string::npos) {
      const auto lo = number(part.substr(0, colon)), hi = number(part.substr(colon + 1));
      if (hi <= lo) throw UsageError("empty index range '" + part + "' (ranges are lo:hi, hi exclusive)");
      for (auto i = lo; i < hi; ++i) out.push_back(i);
    } else {
      out.push_back(number(part));
    }
  }
  if (out.empty()) throw UsageError("--indices selects nothing");
  for (auto i : out)
    if (i >= n) throw UsageError("index " + std::to_string(i) + " out of range for a dataset of " + std::to_string(n));
  return out;
}

void check_steps(int steps, bool allow_any) {
  if (steps < 1 || steps > kDiffusionSteps)
    throw UsageError("--steps must lie in [1, " + std::to_string(kDiffusionSteps) + "]");
  if (!allow_any && std::find(kTestedSteps.begin(), kTestedSteps.end(), steps) == kTestedSteps.end())
    throw UsageError("--steps " + std::to_string(steps) +
                     " is not one of 1000, 250, 100, 25, 10, 5 (pass --allow-any-steps to override)");
}

std::vector<int> parse_steps_list(const std::string& spec, bool allow_any) {
  std::vector<int> steps;
  std::stringstream ss(spec);
  for (std::string part; std::getline(ss, part, ',');) {
    int v = 0;
    const auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (part.empty() || ec != std::errc{} || p != part.data() + part.size())
      throw UsageError("bad step count '" + part + "' in --steps-list");
    check_steps(v, allow_any);
    steps.push_back(v);
  }
  if (steps.empty()) throw UsageError("--steps-list is empty");
  return steps;
}

std::string require_out(const Globals& g, const char* what) {
  if (g.out.empty()) throw UsageError(std::string("--out is required (") + what + ")");
  return g.out;
}

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void require_file(const std::string& path, const char* flag) {
  if (!fs::is_regular_file(path)) throw UsageError(std::string(flag) + " '" + path + "' does not exist");
}

std::vector<dataset::Sample> read_records(dataset::DatasetReader& reader, const std::vector<std::uint64_t>& idx) {
  std::vector<dataset::Sample> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(reader.read(i));
  return out;
}

int square_grid(const dataset::DatasetReader& reader) {
  const auto& h = reader.header();
  if (h.nx != h.ny) throw UsageError("DiT commands need a square dataset grid, got " + std::to_string(h.nx) + "x" +
                                     std::to_string(h.ny));
  return static_cast<int>(h.nx);
}

// ---------------------------------------------------------------- optimize

int cmd_optimize(const Globals& g, const OptimizeArgs& a, std::ostream& out) {
  const std::string prefix = require_out(g, "output prefix");
  Problem p;
  if (io::is_problem_preset(a.problem)) {
    p = io::problem_preset(a.problem, a.grid, a.vf.value_or(0.4));
  } else {
    if (!fs::exists(a.problem))
      throw UsageError("--problem '" + a.problem + "' is neither a preset (cantilever, bridge) nor a file");
    p = io::load_problem(a.problem);
    if (a.vf) p.volume_fraction = *a.vf;
  }
  p.seed = g.seed;
  p.validate();

  simp::SimpConfig cfg;
  cfg.max_iters = a.iters;
  cfg.penalization = a.penal;
  cfg.filter_radius = a.rmin;
  cfg.validate();

  const auto t0 = Clock::now();
  const auto trace = simp::optimize(p, cfg);
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();

  ensure_parent(prefix);
  io::write_grid_text_file(prefix + ".txt", trace.final_density);
  io::write_pgm_file(prefix + ".pgm", trace.final_density);
  {
    std::ofstream csv(prefix + ".trace.csv", std::ios::trunc);
    csv << std::setprecision(17) << "iteration,compliance,volume\n";
    csv << 0 << ',' << trace.initial_compliance << ',' << p.volume_fraction << '\n';
    for (std::size_t k = 0; k < trace.compliance_history.size(); ++k)
      csv << k + 1 << ',' << trace.compliance_history[k] << ',' << trace.volume_history[k] << '\n';
    if (!csv) throw std::runtime_error("write failed: " + prefix + ".trace.csv");
  }
  {
    std::ofstream pf(prefix + ".problem", std::ios::trunc);
    io::write_problem(pf, p);
  }
  out << std::setprecision(10) << "iterations " << trace.iterations_run << "  initial compliance "
      << trace.initial_compliance << "  final compliance " << trace.final_compliance << "  volume "
      << trace.final_density.mean() << "  (" << std::setprecision(3) << secs << " s)\n"
      << "wrote " << prefix << ".txt, .pgm, .trace.csv, .problem\n";
  return kExitOk;
}

// ------------------------------------------------------------- gen-dataset

int cmd_gen_dataset(const Globals& g, const GenArgs& a, int threads, std::ostream& out) {
  const std::string path = require_out(g, "dataset path");
  if (a.n == 0) throw UsageError("--n must be positive");
  simp::SimpConfig cfg;
  cfg.max_iters = a.iters;
  cfg.validate();
  sampler::DatasetOptions opts;
  opts.sampler.nx = opts.sampler.ny = a.grid;
  opts.threads = threads;
  ensure_parent(path);
  const auto t0 = Clock::now();
  const auto s = sampler::generate_dataset(a.n, g.seed, cfg, path, opts);
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  out << "wrote " << s.written << " of " << s.requested << " records to " << path << " (" << s.failures
      << " failures, " << std::setprecision(3) << secs << " s)\n"
      << "split: " << s.train_indices.size() << " train, " << s.validation_indices.size() << " validation\n";
  for (auto seed : s.failed_seeds) out << "failed seed " << seed << '\n';
  return s.written ? kExitOk : kExitRuntime;
}

// ------------------------------------------------------------------- train

dit::DiTConfig model_config(const TrainArgs& a, int img) {
  dit::DiTConfig cfg;
  if (a.patch != 2 && a.patch != 4 && a.patch != 8)
    throw UsageError("--patch " + std::to_string(a.patch) + " is not one of {2, 4, 8}");
  if (a.size == "desk") {
    cfg = dit::DiTConfig::desk();
    cfg.img_size = img;
    cfg.patch_size = a.patch;
  } else {
    dit::ModelSize size;
    try {
      size = dit::parse_model_size(a.size);
    } catch (const std::invalid_argument&) {
      throw UsageError("--size '" + a.size + "' is not one of tiny, small, base, desk");
    }
    cfg = dit::DiTConfig::preset(size, a.patch, img);
  }
  cfg.log1p_fields = a.log1p;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

// Keeps the rows of an existing loss log up to the resumed step.
void truncate_log(const std::string& path, std::uint64_t step) {
  std::ifstream in(path);
  std::string kept, line;
  if (!in || !std::getline(in, line)) {
    std::ofstream(path, std::ios::trunc) << "step,loss\n";
    return;
  }
  kept = line + "\n";
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (std::stoull(line.substr(0, comma)) > step) break;
    kept += line + "\n";
  }
  in.close();
  std::ofstream(path, std::ios::trunc) << kept;
}

int cmd_train(const Globals& g, const TrainArgs& a, bool seed_given, std::ostream& out) {
  const std::string ckpt_path = require_out(g, "checkpoint path");
  require_file(a.dataset, "--dataset");
  dataset::DatasetReader reader(a.dataset);
  const int img = square_grid(reader);
  const auto idx = parse_indices(a.indices, reader.size());
  auto data = read_records(reader, idx);

  dit::TrainConfig tc;
  tc.batch_size = a.batch;
  tc.learning_rate = a.lr;
  tc.total_steps = a.steps;
  tc.seed = g.seed;
  tc.checkpoint_every = a.checkpoint_every;
  tc.checkpoint_path = ckpt_path;
  tc.diffusion_steps = kDiffusionSteps;

  const std::string log_path = a.log.empty() ? ckpt_path + ".loss.csv" : a.log;
  ensure_parent(ckpt_path);
  ensure_parent(log_path);

  std::unique_ptr<dit::Trainer> trainer;
  if (!a.resume.empty()) {
    require_file(a.resume, "--resume");
    const auto ck = dit::load_checkpoint(a.resume);
    if (!seed_given) tc.seed = ck.seed;
    if (tc.seed != ck.seed)
      throw UsageError("--seed " + std::to_string(tc.seed) + " does not match the checkpoint seed " +
                       std::to_string(ck.seed));
    if (ck.config.img_size != img) throw UsageError("checkpoint resolution does not match the dataset");
    tc.validate();
    trainer = std::make_unique<dit::Trainer>(ck, tc, std::move(data));
    truncate_log(log_path, ck.step);
    out << "resumed " << ck.config.name() << " at step " << ck.step << '\n';
  } else {
    const auto mc = model_config(a, img);
    tc.validate();
    trainer = std::make_unique<dit::Trainer>(mc, tc, std::move(data));
    std::ofstream(log_path, std::ios::trunc) << "step,loss\n";
  }
  const auto& mc = trainer->model().config();
  out << "model " << mc.name() << "  params " << trainer->model().params().data.size() << "  tokens " << mc.tokens()
      << "  records " << idx.size() << '\n';

  std::ofstream log(log_path, std::ios::app);
  log << std::setprecision(9);
  const auto t0 = Clock::now();
  float last = 0;
  try {
    trainer->run([&](std::uint64_t step, float loss) {
      log << step << ',' << loss << '\n';
      if (tc.checkpoint_every && step % tc.checkpoint_every == 0) log.flush();
      last = loss;
      return true;
    });
  } catch (const dit::TrainingError& e) {
    log.flush();
    out << "halted: " << e.what() << "; last good state saved to " << ckpt_path << '\n';
    return kExitRuntime;
  }
  log.flush();
  if (!log) throw std::runtime_error("write failed: " + log_path);
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  out << "step " << trainer->steps_done() << "  loss " << std::setprecision(6) << last << "  (" << std::setprecision(3)
      << secs << " s)\nwrote " << ckpt_path << " and " << log_path << '\n';
  return kExitOk;
}

// ------------------------------------------------------------------ sample

struct Denoisers {
  // "oracle" builds a per-batch denoiser that knows the stored topologies.
  bool oracle = false;
  std::shared_ptr<const dit::DiT<float>> model;
  std::string name;
};

Denoisers open_denoiser(const std::string& ckpt, int img) {
  Denoisers d;
  if (ckpt == "oracle") {
    d.oracle = true;
    d.name = "oracle";
    return d;
  }
  require_file(ckpt, "--ckpt");
  const auto ck = dit::load_checkpoint(ckpt);
  if (ck.config.img_size != img)
    throw UsageError("checkpoint resolution " + std::to_string(ck.config.img_size) + " does not match the dataset grid " +
                     std::to_string(img));
  auto model = std::make_shared<dit::DiT<float>>(ck.config);
  model->params() = ck.params;
  d.model = std::move(model);
  d.name = ck.config.name();
  return d;
}

struct BatchTiming {
  std::size_t batch = 0;
  std::uint64_t first_index = 0;
  std::size_t count = 0;
  double seconds = 0;
};

struct SampleRun {
  std::vector<std::vector<float>> topologies;  // aligned with the index list
  std::vector<BatchTiming> timings;
  double total_seconds = 0;
};

SampleRun sample_indices(const Denoisers& den, const std::vector<dataset::Sample>& records,
                         const std::vector<std::uint64_t>& idx, int steps, int batch, std::uint64_t seed,
                         int threads) {
  const auto schedule = diffusion::linear_schedule(kDiffusionSteps);
  const auto plan = diffusion::make_plan(kDiffusionSteps, steps);
  const std::size_t nb = (idx.size() + batch - 1) / batch;
  SampleRun run;
  run.topologies.resize(idx.size());
  run.timings.resize(nb);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t b; (b = next.fetch_add(1)) < nb;) {
      try {
        const std::size_t lo = b * batch, hi = std::min(idx.size(), lo + batch);
        std::vector<dit::SampleCondition> conds;
        std::vector<std::vector<float>> clean;
        for (std::size_t k = lo; k < hi; ++k) {
          conds.push_back(dit::SampleCondition::from_sample(records[k], mix_seed(seed, idx[k])));
          clean.push_back(records[k].topology);
        }
        std::unique_ptr<dit::Denoiser> d;
        if (den.oracle)
          d = std::make_unique<dit::OracleDenoiser>(records[lo].nx, std::move(clean), schedule);
        else
          d = std::make_unique<dit::ModelDenoiser>(den.model);
        const auto t0 = Clock::now();
        auto res = dit::sample_topologies(*d, schedule, plan, conds);
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        for (std::size_t k = lo; k < hi; ++k) run.topologies[k] = std::move(res[k - lo]);
        run.timings[b] = {b, idx[lo], hi - lo, secs};
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < std::min<int>(threads, static_cast<int>(nb)); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  for (const auto& t : run.timings) run.total_seconds += t.seconds;
  return run;
}

std::string sample_file(const std::string& dir, std::uint64_t index) {
  return (fs::path(dir) / ("sample_" + std::to_string(index))).string();
}

int cmd_sample(const Globals& g, const SampleArgs& a, int threads, std::ostream& out) {
  const std::string dir = require_out(g, "output directory");
  check_steps(a.steps, a.allow_any_steps);
  if (a.batch < 1) throw UsageError("--batch must be positive");
  require_file(a.dataset, "--dataset");
  dataset::DatasetReader reader(a.dataset);
  const int img = square_grid(reader);
  const auto idx = parse_indices(a.indices, reader.size());
  const auto records = read_records(reader, idx);
  const auto den = open_denoiser(a.ckpt, img);

  const auto run = sample_indices(den, records, idx, a.steps, a.batch, g.seed, threads);
  fs::create_directories(dir);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto field = io::field_from(run.topologies[k], img, img);
    io::write_grid_text_file(sample_file(dir, idx[k]) + ".txt", field);
    io::write_pgm_file(sample_file(dir, idx[k]) + ".pgm", field);
  }
  std::ofstream csv(fs::path(dir) / "timing.csv", std::ios::trunc);
  csv << "batch,first_index,count,steps,seconds\n" << std::setprecision(6);
  for (const auto& t : run.timings)
    csv << t.batch << ',' << t.first_index << ',' << t.count << ',' << a.steps << ',' << t.seconds << '\n';
  if (!csv) throw std::runtime_error("write failed: timing.csv");
  out << "sampled " << idx.size() << " topologies with " << den.name << " at " << a.steps << " steps in "
      << std::setprecision(4) << run.total_seconds << " s; wrote " << dir << '\n';
  return kExitOk;
}

// -------------------------------------------------------------------- eval

metrics::SuiteReport evaluate_against(const std::vector<std::vector<float>>& generated,
                                      const std::vector<dataset::Sample>& records,
                                      const std::vector<std::uint64_t>& idx, int threads) {
  std::vector<fem::DensityField> gen, truth;
  std::vector<Problem> problems;
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto& r = records[k];
    sampler::SamplerConfig sc;
    sc.nx = r.nx;
    sc.ny = r.ny;
    problems.push_back(sampler::problem_for_sample(r, sc));
    truth.push_back(io::field_from(r.topology, r.nx, r.ny));
    gen.push_back(io::field_from(generated[k], r.nx, r.ny));
  }
  auto report = metrics::evaluate_suite(gen, truth, problems, threads);
  for (std::size_t k = 0; k < report.samples.size(); ++k) report.samples[k].index = static_cast<std::int64_t>(idx[k]);
  return report;
}

std::string with_suffix(const std::string& path, const std::string& suffix) {
  fs::path p(path);
  if (p.extension() == ".csv") p.replace_extension();
  return p.string() + suffix;
}

int cmd_eval(const Globals& g, const EvalArgs& a, int threads, std::ostream& out) {
  const std::string summary_path = require_out(g, "summary CSV");
  require_file(a.dataset, "--dataset");
  dataset::DatasetReader reader(a.dataset);
  if (!fs::is_directory(a.generated)) throw UsageError("--generated '" + a.generated + "' is not a directory");
  std::vector<std::uint64_t> idx;
  for (const auto& entry : fs::directory_iterator(a.generated)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("sample_", 0) != 0 || entry.path().extension() != ".txt") continue;
    const auto stem = entry.path().stem().string().substr(7);
    std::uint64_t i = 0;
    const auto [p, ec] = std::from_chars(stem.data(), stem.data() + stem.size(), i);
    if (ec != std::errc{} || p != stem.data() + stem.size()) continue;
    if (i >= reader.size()) throw UsageError(name + " refers to record " + stem + " beyond the dataset");
    idx.push_back(i);
  }
  if (idx.empty()) throw UsageError("no sample_<index>.txt files in " + a.generated);
  std::sort(idx.begin(), idx.end());
  const auto records = read_records(reader, idx);
  std::vector<std::vector<float>> generated;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto grid = io::read_grid_text_file(sample_file(a.generated, idx[k]) + ".txt");
    if (grid.nx != records[k].nx || grid.ny != records[k].ny)
      throw UsageError("sample_" + std::to_string(idx[k]) + " grid does not match the dataset");
    generated.emplace_back(grid.values.begin(), grid.values.end());
  }
  const auto report = evaluate_against(generated, records, idx, threads);

  ensure_parent(summary_path);
  const std::string samples_path = with_suffix(summary_path, ".samples.csv");
  const std::string scatter_path = with_suffix(summary_path, ".scatter.csv");
  {
    std::ofstream s(summary_path, std::ios::trunc);
    metrics::write_summary_csv(s, report);
    std::ofstream p(samples_path, std::ios::trunc);
    metrics::write_samples_csv(p, report);
    std::ofstream c(scatter_path, std::ios::trunc);
    metrics::write_scatter_csv(c, report);
    if (!s || !p || !c) throw std::runtime_error("failed writing evaluation CSVs");
  }
  out << "evaluated " << report.size << " samples (" << report.unsolvable << " unsolvable)\n";
  for (const auto& [name, value] : metrics::table_rows(report))
    out << "  " << std::left << std::setw(34) << name << std::setprecision(6) << value << '\n';
  if (report.median_above_mean) out << "note: median compliance error exceeds the mean\n";
  out << "wrote " << summary_path << ", " << samples_path << ", " << scatter_path << '\n';
  return kExitOk;
}

// --------------------------------------------------------- subsample-study

int cmd_study(const Globals& g, const StudyArgs& a, int threads, std::ostream& out) {
  const std::string path = require_out(g, "report CSV");
  const auto steps = parse_steps_list(a.steps_list, a.allow_any_steps);
  if (a.batch < 1) throw UsageError("--batch must be positive");
  require_file(a.dataset, "--dataset");
  dataset::DatasetReader reader(a.dataset);
  const int img = square_grid(reader);
  const auto idx = parse_indices(a.indices, reader.size());
  const auto records = read_records(reader, idx);
  const auto den = open_denoiser(a.ckpt, img);

  ensure_parent(path);
  std::ofstream csv(path, std::ios::trunc);
  csv << "steps,seconds,samples,solvable";
  metrics::SuiteReport empty;
  for (const auto& [name, v] : metrics::table_rows(empty)) csv << ",\"" << name << '"';
  csv << ",metrics_version\n" << std::setprecision(10);
  out << std::left << std::setw(7) << "steps" << std::setw(12) << "seconds" << "compliance error (%)\n";
  for (int s : steps) {
    const auto run = sample_indices(den, records, idx, s, a.batch, g.seed, threads);
    const auto report = evaluate_against(run.topologies, records, idx, threads);
    csv << s << ',' << run.total_seconds << ',' << report.size << ',' << report.solvable;
    for (const auto& [name, v] : metrics::table_rows(report)) csv << ',' << v;
    csv << ',' << metrics::kMetricsVersion << '\n';
    out << std::setw(7) << s << std::setw(12) << run.total_seconds << report.mean_abs_compliance_error << '\n';
  }
  if (!csv) throw std::runtime_error("write failed: " + path);
  out << "wrote " << path << '\n';
  return kExitOk;
}

// ------------------------------------------------------------------- serve

int cmd_serve(const ServeArgs& a, std::ostream& out) {
  service::ServiceConfig cfg;
  cfg.host = a.host;
  cfg.port = a.port;
  cfg.checkpoint_dir = a.checkpoint_dir;
  cfg.queue_width = a.queue_width;
  if (cfg.queue_width < 1) throw UsageError("--queue-width must be positive");
  service::DesignService svc(cfg);
  out << "serving on http://" << a.host << ':' << a.port << std::endl;
  svc.run();
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"topoforge: topology optimization and diffusion-model design tools", "topoforge"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "Read options from a key = value file");
  app.allow_config_extras(CLI::config_extras_mode::error);

  Globals g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--threads", g.threads, "Worker threads (default: TOPOFORGE_THREADS or 1)");
  app.add_option("--out", g.out, "Output path");

  OptimizeArgs oa;
  auto* opt = app.add_subcommand("optimize", "Run SIMP on one problem");
  opt->add_option("--problem", oa.problem, "Problem file or preset (cantilever, bridge)");
  opt->add_option("--vf", oa.vf, "Volume fraction (overrides the file; presets default to 0.4)");
  opt->add_option("--iters", oa.iters, "SIMP iterations");
  opt->add_option("--grid", oa.grid, "Grid size for presets");
  opt->add_option("--penal", oa.penal, "Penalization exponent");
  opt->add_option("--rmin", oa.rmin, "Sensitivity filter radius");

  GenArgs ga;
  auto* gen = app.add_subcommand("gen-dataset", "Generate optimized samples from random problems");
  gen->add_option("--n", ga.n, "Number of samples");
  gen->add_option("--grid", ga.grid, "Grid size");
  gen->add_option("--iters", ga.iters, "SIMP iterations per sample");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a DiT denoiser");
  train->add_option("--dataset", ta.dataset, "Dataset file")->required();
  train->add_option("--size", ta.size, "tiny, small, base or desk");
  train->add_option("--patch", ta.patch, "Patch size: 2, 4 or 8");
  train->add_option("--steps", ta.steps, "Total optimizer steps");
  train->add_option("--batch", ta.batch, "Batch size");
  train->add_option("--lr", ta.lr, "Adam learning rate");
  train->add_option("--indices", ta.indices, "Records: train, validation, all, or lists like 0:16,20");
  train->add_option("--checkpoint-every", ta.checkpoint_every, "Checkpoint interval in steps (0: end only)");
  train->add_option("--resume", ta.resume, "Checkpoint to continue from");
  train->add_option("--log", ta.log, "Loss log CSV (default <out>.loss.csv)");
  train->add_flag("--log1p", ta.log1p, "log1p on the stress and strain channels");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "Generate topologies for dataset conditions");
  sample->add_option("--ckpt", sa.ckpt, "Checkpoint file, or 'oracle'")->required();
  sample->add_option("--dataset", sa.dataset, "Dataset file")->required();
  sample->add_option("--indices", sa.indices, "Records: all, train, validation, or lists like 0:16,20");
  sample->add_option("--steps", sa.steps, "Sampling steps: 1000, 250, 100, 25, 10 or 5");
  sample->add_option("--batch", sa.batch, "Batch size");
  sample->add_flag("--allow-any-steps", sa.allow_any_steps, "Accept step counts outside the tested set");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score generated topologies against the dataset");
  eval->add_option("--generated", ea.generated, "Directory of sample_<index>.txt grids")->required();
  eval->add_option("--dataset", ea.dataset, "Dataset file")->required();

  StudyArgs st;
  auto* study = app.add_subcommand("subsample-study", "Timing and metrics across sampling step counts");
  study->add_option("--ckpt", st.ckpt, "Checkpoint file, or 'oracle'")->required();
  study->add_option("--dataset", st.dataset, "Dataset file")->required();
  study->add_option("--indices", st.indices, "Records: all, train, validation, or lists like 0:16,20");
  study->add_option("--steps-list", st.steps_list, "Comma-separated step counts, reported in this order");
  study->add_option("--batch", st.batch, "Batch size");
  study->add_flag("--allow-any-steps", st.allow_any_steps, "Accept step counts outside the tested set");

  ServeArgs sv;
  auto* serve = app.add_subcommand("serve", "Run the local design service");
  serve->add_option("--port", sv.port, "TCP port");
  serve->add_option("--host", sv.host, "Bind address");
  serve->add_option("--checkpoint-dir", sv.checkpoint_dir, "Directory listed by /api/checkpoints");
  serve->add_option("--queue-width", sv.queue_width, "Concurrently running jobs");

  std::vector<std::string> args;
  for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
  try {
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitValidation;
  }

  try {
    const int threads = resolve_threads(g.threads);
    CLI::App* sub = app.get_subcommands().front();
    std::string line = "topoforge --threads " + std::to_string(threads);
    append_options(line, &app);
    line += " " + sub->get_name();
    append_options(line, sub);
    out << "repro: " << line << std::endl;

    const std::string name = sub->get_name();
    if (name == "optimize") return cmd_optimize(g, oa, out);
    if (name == "gen-dataset") return cmd_gen_dataset(g, ga, threads, out);
    if (name == "train") return cmd_train(g, ta, app.get_option("--seed")->count() > 0, out);
    if (name == "sample") return cmd_sample(g, sa, threads, out);
    if (name == "eval") return cmd_eval(g, ea, threads, out);
    if (name == "subsample-study") return cmd_study(g, st, threads, out);
    if (name == "serve") return cmd_serve(sv, out);
    err << "unhandled subcommand " << name << '\n';
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace topoforge::cli
