#pragma once

// epsilon-prediction training loop with Adam. Data order, timesteps and noise
// are pure functions of (seed, step), so resuming from a checkpoint continues
// the exact same sequence.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "topoforge/checkpoint.hpp"
#include "topoforge/dataset.hpp"
#include "topoforge/diffusion.hpp"
#include "topoforge/dit.hpp"

namespace topoforge::dit {

struct TrainConfig {
  int batch_size = 16;
  double learning_rate = 1e-4;
  std::uint64_t total_steps = 1000;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 0;  // 0: only at the end
  std::string checkpoint_path;         // empty: never written by the trainer
  int diffusion_steps = 1000;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  void validate() const;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::uint64_t step, const std::string& what)
      : std::runtime_error("training step " + std::to_string(step) + ": " + what), step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

// Topology remapped to [-1, 1]; conditioning fields raw.
DiTInput<float> make_input(const std::vector<const dataset::Sample*>& items, const std::vector<float>& noisy,
                           const std::vector<double>& t);
std::vector<float> conditioning_vector(const dataset::Sample& s);

class Trainer {
 public:
  // Fresh run: adaLN-Zero init from cfg.seed.
  Trainer(const DiTConfig& model_cfg, const TrainConfig& cfg, std::vector<dataset::Sample> data);
  // Resume: model config, weights, moments and step come from the checkpoint; the
  // seed must match (step-derived streams would otherwise diverge).
  Trainer(const Checkpoint& ckpt, const TrainConfig& cfg, std::vector<dataset::Sample> data);

  // One optimizer step; returns the batch loss before the update. Throws
  // TrainingError on a non-finite loss or gradient, leaving the parameters at
  // the last good state.
  float step();

  // Steps until total_steps (or until on_step returns false). Writes
  // periodic checkpoints; on a numeric failure the last good state is written
  // before the error propagates.
  void run(const std::function<bool(std::uint64_t step, float loss)>& on_step = {});

  std::uint64_t steps_done() const { return step_; }
  const DiT<float>& model() const { return model_; }
  DiT<float>& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  Checkpoint checkpoint() const;

  // Dataset indices used by the given step, in batch order.
  std::vector<std::size_t> batch_indices(std::uint64_t step) const;

 private:
  void check_data() const;
  const std::vector<std::size_t>& permutation(std::uint64_t epoch) const;

  TrainConfig cfg_;
  std::vector<dataset::Sample> data_;
  DiT<float> model_;
  diffusion::NoiseSchedule schedule_;
  std::vector<float> m_, v_;
  std::uint64_t step_ = 0;
  DiTParams<float> grad_;
  mutable std::uint64_t perm_epoch_ = UINT64_MAX;
  mutable std::vector<std::size_t> perm_;
};

}  // namespace topoforge::dit
