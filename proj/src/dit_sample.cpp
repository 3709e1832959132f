#include "topoforge/dit_sample.hpp"

#include <algorithm>
#include <cmath>

#include "topoforge/rng.hpp"

namespace topoforge::dit {

SampleCondition SampleCondition::from_sample(const dataset::Sample& s, std::uint64_t noise_seed) {
  SampleCondition c;
  c.stress = s.stress;
  c.strain = s.strain_energy;
  c.cond = {s.load_x, s.load_y, s.fx, s.fy, s.volume_fraction};
  c.noise_seed = noise_seed;
  return c;
}

std::vector<double> ModelDenoiser::predict_eps(const std::vector<double>& x_t, int t,
                                               const std::vector<SampleCondition>& batch) const {
  DiTInput<float> in;
  in.batch = static_cast<int>(batch.size());
  in.noisy.assign(x_t.begin(), x_t.end());
  in.t.assign(batch.size(), static_cast<double>(t));
  for (const auto& c : batch) {
    in.stress.insert(in.stress.end(), c.stress.begin(), c.stress.end());
    in.strain.insert(in.strain.end(), c.strain.begin(), c.strain.end());
    in.cond.insert(in.cond.end(), c.cond.begin(), c.cond.end());
  }
  const auto eps = model_->forward(in);
  return {eps.begin(), eps.end()};
}

OracleDenoiser::OracleDenoiser(int img_size, std::vector<std::vector<float>> clean, diffusion::NoiseSchedule schedule)
    : img_(img_size), clean_(std::move(clean)), schedule_(std::move(schedule)) {
  for (const auto& c : clean_)
    if (c.size() != static_cast<std::size_t>(img_) * img_)
      throw std::invalid_argument("oracle clean topology does not match the grid size");
}

std::vector<double> OracleDenoiser::predict_eps(const std::vector<double>& x_t, int t,
                                                const std::vector<SampleCondition>& batch) const {
  if (batch.size() != clean_.size()) throw std::invalid_argument("oracle batch size mismatch");
  schedule_.check_t(t, 1);
  const double a = std::sqrt(schedule_.alpha_bar[t]), b = std::sqrt(1.0 - schedule_.alpha_bar[t]);
  const std::size_t hw = static_cast<std::size_t>(img_) * img_;
  std::vector<double> eps(x_t.size());
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t k = 0; k < hw; ++k) {
      const double x0 = 2.0 * clean_[i][k] - 1.0;
      eps[i * hw + k] = (x_t[i * hw + k] - a * x0) / b;
    }
  return eps;
}

std::vector<std::vector<float>> sample_topologies(const Denoiser& denoiser, const diffusion::NoiseSchedule& schedule,
                                                  const diffusion::TimestepPlan& plan,
                                                  const std::vector<SampleCondition>& batch,
                                                  const SampleObserver& observer) {
  const int img = denoiser.img_size();
  const std::size_t hw = static_cast<std::size_t>(img) * img;
  if (plan.steps.empty()) throw std::invalid_argument("empty timestep plan");
  for (const auto& c : batch)
    if (c.stress.size() != hw || c.strain.size() != hw || c.cond.size() != 5)
      throw std::invalid_argument("conditioning fields do not match the model resolution " + std::to_string(img) +
                                  "x" + std::to_string(img));

  std::vector<double> x(batch.size() * hw);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Rng rng(batch[i].noise_seed);
    for (std::size_t k = 0; k < hw; ++k) x[i * hw + k] = rng.normal();
  }
  auto to_unit = [](double v) { return static_cast<float>(std::clamp((v + 1.0) / 2.0, 0.0, 1.0)); };

  std::vector<float> est;
  for (std::size_t k = 0; k < plan.steps.size(); ++k) {
    const int t = plan.steps[k];
    const auto eps = denoiser.predict_eps(x, t, batch);
    const int t_prev = plan.next(k);
    if (observer) {
      const auto x0 = diffusion::predict_x0<double>(x, eps, t, schedule);
      est.resize(x0.size());
      std::transform(x0.begin(), x0.end(), est.begin(), to_unit);
    }
    x = diffusion::ddim_step<double>(x, eps, t, t_prev, schedule);
    if (observer && !observer(k, t, est)) throw SamplingCancelled();
  }

  std::vector<std::vector<float>> out(batch.size(), std::vector<float>(hw));
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t k = 0; k < hw; ++k) out[i][k] = to_unit(x[i * hw + k]);
  return out;
}

}  // namespace topoforge::dit
