#include "topoforge/diffusion.hpp"

#include <algorithm>

namespace topoforge::diffusion {

double NoiseSchedule::posterior_variance(int t) const {
  check_t(t, 1);
  return (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
}

NoiseSchedule linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("schedule needs T >= 1");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
    throw std::invalid_argument("need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.assign(T + 1, 0.0);
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    s.beta[t] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  return s;
}

TimestepPlan make_plan(int T, int S) {
  if (T < 1 || S < 1 || S > T)
    throw std::invalid_argument("plan needs 1 <= S <= T (got S = " + std::to_string(S) + ", T = " +
                                std::to_string(T) + ")");
  TimestepPlan plan;
  for (int k = 0; k < S; ++k) {
    const double v = S == 1 ? T : T - static_cast<double>(k) * (T - 1) / (S - 1);
    const int step = static_cast<int>(std::lround(v));
    if (plan.steps.empty() || plan.steps.back() != step) plan.steps.push_back(step);
  }
  return plan;
}

}  // namespace topoforge::diffusion
