#pragma once

// Noise schedule and the forward / reverse diffusion updates, independent of
// the denoiser. Timesteps run 1..T; alpha_bar[0] = 1 stands for clean data.

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace topoforge::diffusion {

struct NoiseSchedule {
  int T = 0;
  // Index 0 holds the clean-data convention (beta 0, alpha_bar 1).
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  void check_t(int t, int lo = 0) const {
    if (t < lo || t > T)
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                              std::to_string(T) + "]");
  }
  // sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
  double posterior_variance(int t) const;
};

NoiseSchedule linear_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);

// Steps visited by the sampler; after the last entry the chain hops to t = 0.
struct TimestepPlan {
  std::vector<int> steps;
  int next(std::size_t i) const { return i + 1 < steps.size() ? steps[i + 1] : 0; }
};

// Rounded linspace T .. 1 with S entries, deduplicated.
TimestepPlan make_plan(int T, int S);

namespace detail {
template <typename V>
void check_same(std::span<const V> a, std::span<const V> b, const char* what) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}
}  // namespace detail

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename V>
std::vector<V> q_sample(std::span<const V> x0, int t, std::span<const V> eps, const NoiseSchedule& s) {
  s.check_t(t);
  detail::check_same(x0, eps, "q_sample");
  const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
  std::vector<V> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = static_cast<V>(a * x0[i] + b * eps[i]);
  return out;
}

// x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t) + sigma_t z; z is ignored at t = 1.
template <typename V>
std::vector<V> ddpm_step(std::span<const V> x_t, std::span<const V> eps_pred, int t, std::span<const V> z,
                         const NoiseSchedule& s) {
  s.check_t(t, 1);
  detail::check_same(x_t, eps_pred, "ddpm_step");
  const bool noisy = t > 1;
  if (noisy) detail::check_same(x_t, z, "ddpm_step");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[t]);
  const double eps_coef = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
  const double sigma = noisy ? std::sqrt(s.posterior_variance(t)) : 0.0;
  std::vector<V> out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    double v = inv_sqrt_alpha * (x_t[i] - eps_coef * eps_pred[i]);
    if (noisy) v += sigma * z[i];
    out[i] = static_cast<V>(v);
  }
  return out;
}

// Predicted clean signal (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
template <typename V>
std::vector<V> predict_x0(std::span<const V> x_t, std::span<const V> eps_pred, int t, const NoiseSchedule& s) {
  s.check_t(t);
  detail::check_same(x_t, eps_pred, "predict_x0");
  const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
  std::vector<V> out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = static_cast<V>((x_t[i] - b * eps_pred[i]) / a);
  return out;
}

// Deterministic update t -> t_prev; t_prev = 0 returns the x0 prediction.
template <typename V>
std::vector<V> ddim_step(std::span<const V> x_t, std::span<const V> eps_pred, int t, int t_prev,
                         const NoiseSchedule& s) {
  s.check_t(t);
  s.check_t(t_prev);
  if (t_prev > t) throw std::invalid_argument("ddim_step needs t_prev <= t");
  detail::check_same(x_t, eps_pred, "ddim_step");
  if (t_prev == t) return {x_t.begin(), x_t.end()};
  const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
  const double ap = std::sqrt(s.alpha_bar[t_prev]), bp = std::sqrt(1.0 - s.alpha_bar[t_prev]);
  std::vector<V> out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    const double x0 = (x_t[i] - b * eps_pred[i]) / a;
    out[i] = static_cast<V>(t_prev == 0 ? x0 : ap * x0 + bp * eps_pred[i]);
  }
  return out;
}

}  // namespace topoforge::diffusion
