#include "topoforge/dit_train.hpp"

#include <cmath>
#include <numeric>

#include "topoforge/rng.hpp"

namespace topoforge::dit {

namespace {

constexpr std::uint64_t kPermStream = 0x7065726d75746521ULL;

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (total_steps < 1) throw std::invalid_argument("total_steps must be positive");
  if (diffusion_steps < 1) throw std::invalid_argument("diffusion_steps must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0))
    throw std::invalid_argument("invalid Adam hyperparameters");
}

std::vector<float> conditioning_vector(const dataset::Sample& s) {
  return {s.load_x, s.load_y, s.fx, s.fy, s.volume_fraction};
}

DiTInput<float> make_input(const std::vector<const dataset::Sample*>& items, const std::vector<float>& noisy,
                           const std::vector<double>& t) {
  DiTInput<float> in;
  in.batch = static_cast<int>(items.size());
  in.noisy = noisy;
  in.t = t;
  for (const auto* s : items) {
    in.stress.insert(in.stress.end(), s->stress.begin(), s->stress.end());
    in.strain.insert(in.strain.end(), s->strain_energy.begin(), s->strain_energy.end());
    const auto c = conditioning_vector(*s);
    in.cond.insert(in.cond.end(), c.begin(), c.end());
  }
  return in;
}

Trainer::Trainer(const DiTConfig& model_cfg, const TrainConfig& cfg, std::vector<dataset::Sample> data)
    : cfg_(cfg), data_(std::move(data)), model_(model_cfg), schedule_(diffusion::linear_schedule(cfg.diffusion_steps)) {
  cfg_.validate();
  check_data();
  model_.init_adaln_zero(cfg_.seed);
  m_.assign(model_.params().data.size(), 0.0f);
  v_ = m_;
}

Trainer::Trainer(const Checkpoint& ck, const TrainConfig& cfg, std::vector<dataset::Sample> data)
    : cfg_(cfg), data_(std::move(data)), model_(ck.config), schedule_(diffusion::linear_schedule(cfg.diffusion_steps)) {
  cfg_.validate();
  check_data();
  if (ck.seed != cfg_.seed)
    throw std::invalid_argument("resume seed " + std::to_string(cfg_.seed) + " differs from checkpoint seed " +
                                std::to_string(ck.seed));
  if (ck.params.data.size() != model_.params().data.size())
    throw std::invalid_argument("checkpoint parameters do not match its config");
  model_.params().data = ck.params.data;
  step_ = ck.step;
  if (ck.adam_m.empty()) {
    m_.assign(ck.params.data.size(), 0.0f);
    v_ = m_;
  } else {
    m_ = ck.adam_m;
    v_ = ck.adam_v;
  }
}

void Trainer::check_data() const {
  if (data_.empty()) throw std::invalid_argument("training set is empty");
  const int img = model_.config().img_size;
  for (std::size_t i = 0; i < data_.size(); ++i)
    if (data_[i].nx != img || data_[i].ny != img)
      throw std::invalid_argument("sample " + std::to_string(i) + " is " + std::to_string(data_[i].nx) + "x" +
                                  std::to_string(data_[i].ny) + " but the model expects " + std::to_string(img) +
                                  "x" + std::to_string(img));
}

const std::vector<std::size_t>& Trainer::permutation(std::uint64_t epoch) const {
  if (epoch != perm_epoch_) {
    perm_.resize(data_.size());
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
    Rng rng(mix_seed(cfg_.seed ^ kPermStream, epoch));
    for (std::size_t i = perm_.size(); i > 1; --i)
      std::swap(perm_[i - 1], perm_[static_cast<std::size_t>(rng.below(static_cast<int>(i)))]);
    perm_epoch_ = epoch;
  }
  return perm_;
}

std::vector<std::size_t> Trainer::batch_indices(std::uint64_t step) const {
  const std::uint64_t n = data_.size();
  std::vector<std::size_t> out;
  for (int j = 0; j < cfg_.batch_size; ++j) {
    const std::uint64_t g = step * cfg_.batch_size + j;
    out.push_back(permutation(g / n)[g % n]);
  }
  return out;
}

float Trainer::step() {
  const auto idx = batch_indices(step_);
  const int HW = model_.config().img_size * model_.config().img_size;
  Rng rng(mix_seed(cfg_.seed, step_));
  std::vector<const dataset::Sample*> items;
  std::vector<float> noisy, eps;
  std::vector<double> t;
  std::vector<float> x0(HW), e(HW);
  for (auto i : idx) {
    const auto& s = data_[i];
    items.push_back(&s);
    const int ti = 1 + rng.below(schedule_.T);
    t.push_back(ti);
    for (int k = 0; k < HW; ++k) {
      x0[k] = 2.0f * s.topology[k] - 1.0f;
      e[k] = static_cast<float>(rng.normal());
    }
    const auto xt = diffusion::q_sample<float>(x0, ti, e, schedule_);
    noisy.insert(noisy.end(), xt.begin(), xt.end());
    eps.insert(eps.end(), e.begin(), e.end());
  }

  float loss;
  try {
    loss = model_.loss_and_grad(make_input(items, noisy, t), eps, grad_);
  } catch (const NumericError& err) {
    throw TrainingError(step_ + 1, err.what());
  }
  if (!std::isfinite(loss)) throw TrainingError(step_ + 1, "non-finite loss");
  for (float g : grad_.data)
    if (!std::isfinite(g)) throw TrainingError(step_ + 1, "non-finite gradient");

  const double k = static_cast<double>(step_ + 1);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, k), bc2 = 1.0 - std::pow(cfg_.beta2, k);
  const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
  const float lr1 = static_cast<float>(cfg_.learning_rate / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2), eps_a = static_cast<float>(cfg_.adam_eps);
  auto& p = model_.params().data;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float g = grad_.data[i];
    m_[i] = b1 * m_[i] + (1.0f - b1) * g;
    v_[i] = b2 * v_[i] + (1.0f - b2) * g * g;
    p[i] -= lr1 * m_[i] / (std::sqrt(v_[i] * inv_bc2) + eps_a);
  }
  ++step_;
  return loss;
}

void Trainer::run(const std::function<bool(std::uint64_t, float)>& on_step) {
  while (step_ < cfg_.total_steps) {
    float loss;
    try {
      loss = step();
    } catch (const TrainingError&) {
      if (!cfg_.checkpoint_path.empty()) save_checkpoint(checkpoint(), cfg_.checkpoint_path);
      throw;
    }
    if (on_step && !on_step(step_, loss)) break;
    if (cfg_.checkpoint_every && !cfg_.checkpoint_path.empty() && step_ % cfg_.checkpoint_every == 0)
      save_checkpoint(checkpoint(), cfg_.checkpoint_path);
  }
  if (!cfg_.checkpoint_path.empty()) save_checkpoint(checkpoint(), cfg_.checkpoint_path);
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.config = model_.config();
  ck.step = step_;
  ck.seed = cfg_.seed;
  ck.learning_rate = cfg_.learning_rate;
  ck.batch_size = cfg_.batch_size;
  ck.params = model_.params();
  ck.adam_m = m_;
  ck.adam_v = v_;
  return ck;
}

}  // namespace topoforge::dit
