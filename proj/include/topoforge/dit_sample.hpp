#pragma once

// Deterministic DDIM sampling of topologies from a denoiser.

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "topoforge/dataset.hpp"
#include "topoforge/diffusion.hpp"
#include "topoforge/dit.hpp"

namespace topoforge::dit {

// Spatial and global conditioning for one generated topology.
struct SampleCondition {
  std::vector<float> stress, strain;  // img^2, raw
  std::vector<float> cond;            // load_x, load_y, fx, fy, f
  std::uint64_t noise_seed = 0;       // seeds x_T for this item only

  static SampleCondition from_sample(const dataset::Sample& s, std::uint64_t noise_seed);
};

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual int img_size() const = 0;
  // eps prediction for a batch of states at one timestep; x_t is batch x img^2.
  virtual std::vector<double> predict_eps(const std::vector<double>& x_t, int t,
                                          const std::vector<SampleCondition>& batch) const = 0;
};

class ModelDenoiser : public Denoiser {
 public:
  explicit ModelDenoiser(std::shared_ptr<const DiT<float>> model) : model_(std::move(model)) {}
  int img_size() const override { return model_->config().img_size; }
  std::vector<double> predict_eps(const std::vector<double>& x_t, int t,
                                  const std::vector<SampleCondition>& batch) const override;

 private:
  std::shared_ptr<const DiT<float>> model_;
};

// Returns the exact noise relative to known clean topologies (one per batch
// item, in [0, 1]): eps = (x_t - sqrt(abar) x0) / sqrt(1 - abar). Used to test
// the pipeline without a trained model.
class OracleDenoiser : public Denoiser {
 public:
  OracleDenoiser(int img_size, std::vector<std::vector<float>> clean, diffusion::NoiseSchedule schedule);
  int img_size() const override { return img_; }
  std::vector<double> predict_eps(const std::vector<double>& x_t, int t,
                                  const std::vector<SampleCondition>& batch) const override;

 private:
  int img_;
  std::vector<std::vector<float>> clean_;
  diffusion::NoiseSchedule schedule_;
};

// Called after each DDIM hop with the plan index, the timestep just left and
// the running x0 estimate in [0, 1] (batch x img^2). Return false to cancel.
using SampleObserver = std::function<bool(std::size_t k, int t, const std::vector<float>& x0_estimate)>;

class SamplingCancelled : public std::runtime_error {
 public:
  SamplingCancelled() : std::runtime_error("sampling cancelled") {}
};

// x_T ~ N(0, I) per item from its noise_seed, DDIM along the plan, final
// estimate mapped from [-1, 1] to [0, 1] and clamped. batch x img^2.
std::vector<std::vector<float>> sample_topologies(const Denoiser& denoiser, const diffusion::NoiseSchedule& schedule,
                                                  const diffusion::TimestepPlan& plan,
                                                  const std::vector<SampleCondition>& batch,
                                                  const SampleObserver& observer = {});

}  // namespace topoforge::dit
