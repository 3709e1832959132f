#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "topoforge/dit.hpp"
#include "topoforge/rng.hpp"

namespace {

using namespace topoforge;
using namespace topoforge::dit;
using MatD = Mat<double>;

MatD random_mat(Rng& rng, int r, int c, double scale = 0.5) {
  MatD m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

DiTConfig grad_config() {
  DiTConfig c;
  c.img_size = 8;
  c.patch_size = 4;
  c.depth = 2;
  c.token_dim = 16;
  c.heads = 2;
  c.freq_dim = 32;
  c.size = ModelSize::Custom;
  return c;
}

template <typename S>
DiTInput<S> random_input(const DiTConfig& cfg, int batch, std::uint64_t seed) {
  Rng rng(seed);
  DiTInput<S> in;
  in.batch = batch;
  const std::size_t n = static_cast<std::size_t>(batch) * cfg.img_size * cfg.img_size;
  for (std::size_t i = 0; i < n; ++i) {
    in.noisy.push_back(static_cast<S>(rng.normal()));
    in.stress.push_back(static_cast<S>(rng.uniform(0.0, 2.0)));
    in.strain.push_back(static_cast<S>(rng.uniform(0.0, 0.5)));
  }
  for (int b = 0; b < batch; ++b) {
    in.t.push_back(1 + rng.below(1000));
    const double a = rng.uniform(0.0, 2 * M_PI);
    for (double v : {rng.uniform(), rng.uniform(), std::cos(a), std::sin(a), rng.uniform(0.3, 0.5)})
      in.cond.push_back(static_cast<S>(v));
  }
  return in;
}

template <typename S>
double max_abs_diff(const std::vector<S>& a, const std::vector<S>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i] - b[i])));
  return m;
}

TEST(Patchify, HandEnumeratedFourByFour) {
  std::vector<double> img(16);
  std::iota(img.begin(), img.end(), 0.0);
  const MatD tok = patchify<double>({img.data()}, 4, 2);
  ASSERT_EQ(tok.rows(), 4);
  ASSERT_EQ(tok.cols(), 4);
  const double expected[4][4] = {{0, 1, 4, 5}, {2, 3, 6, 7}, {8, 9, 12, 13}, {10, 11, 14, 15}};
  for (int n = 0; n < 4; ++n)
    for (int k = 0; k < 4; ++k) EXPECT_EQ(tok(n, k), expected[n][k]) << n << "," << k;
}

TEST(Patchify, ChannelMajorFeatures) {
  std::vector<double> a(16), b(16);
  std::iota(a.begin(), a.end(), 0.0);
  std::iota(b.begin(), b.end(), 100.0);
  const MatD tok = patchify<double>({a.data(), b.data()}, 4, 2);
  ASSERT_EQ(tok.cols(), 8);
  EXPECT_EQ(tok(3, 0), 10);
  EXPECT_EQ(tok(3, 4), 110);
  EXPECT_EQ(tok(3, 7), 115);
}

TEST(Patchify, InverseIsBitwise) {
  Rng rng(3);
  for (int p : {1, 2, 4, 8, 16}) {
    std::vector<float> img(3 * 16 * 16);
    for (auto& v : img) v = static_cast<float>(rng.normal());
    const auto tok = patchify<float>({img.data(), img.data() + 256, img.data() + 512}, 16, p);
    EXPECT_EQ(tok.rows(), (16 / p) * (16 / p));
    std::vector<float> back(img.size());
    unpatchify<float>(tok, 16, p, 3, back.data());
    EXPECT_EQ(back, img) << "p = " << p;
  }
}

TEST(Patchify, WholeImageSingleToken) {
  std::vector<double> img(64);
  std::iota(img.begin(), img.end(), 0.0);
  const MatD tok = patchify<double>({img.data()}, 8, 8);
  ASSERT_EQ(tok.rows(), 1);
  for (int k = 0; k < 64; ++k) EXPECT_EQ(tok(0, k), k);
}

// Naive per-element evaluation of multi-head attention.
MatD attention_oracle(const MatD& x, const MatD& wq, const MatD& bq, const MatD& wk, const MatD& bk,
                      const MatD& wv, const MatD& bv, const MatD& wo, const MatD& bo, int heads) {
  const int n = x.rows(), d = x.cols(), dk = d / heads;
  auto proj = [&](const MatD& w, const MatD& b, int i, int j) {
    double s = b(0, j);
    for (int k = 0; k < d; ++k) s += x(i, k) * w(k, j);
    return s;
  };
  MatD concat = MatD::Zero(n, d);
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i) {
      std::vector<double> score(n);
      double mx = -1e300;
      for (int j = 0; j < n; ++j) {
        double s = 0;
        for (int k = h * dk; k < (h + 1) * dk; ++k) s += proj(wq, bq, i, k) * proj(wk, bk, j, k);
        score[j] = s / std::sqrt(static_cast<double>(dk));
        mx = std::max(mx, score[j]);
      }
      double z = 0;
      for (auto& s : score) z += (s = std::exp(s - mx));
      for (int j = 0; j < n; ++j)
        for (int k = h * dk; k < (h + 1) * dk; ++k) concat(i, k) += score[j] / z * proj(wv, bv, j, k);
    }
  MatD out(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      double s = bo(0, j);
      for (int k = 0; k < d; ++k) s += concat(i, k) * wo(k, j);
      out(i, j) = s;
    }
  return out;
}

TEST(Attention, MatchesNaiveOracle) {
  Rng rng(11);
  for (auto [n, d, heads] : {std::tuple{3, 4, 1}, std::tuple{5, 8, 2}, std::tuple{7, 12, 3}}) {
    const MatD x = random_mat(rng, n, d);
    MatD w[4], b[4];
    for (int i = 0; i < 4; ++i) w[i] = random_mat(rng, d, d, 0.3), b[i] = random_mat(rng, 1, d, 0.1);
    const MatD got = attention<double>(x, w[0], b[0], w[1], b[1], w[2], b[2], w[3], b[3], heads);
    const MatD want = attention_oracle(x, w[0], b[0], w[1], b[1], w[2], b[2], w[3], b[3], heads);
    EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Attention, SingleTokenAndIdenticalRows) {
  Rng rng(12);
  const int d = 6;
  MatD w[4], b[4];
  for (int i = 0; i < 4; ++i) w[i] = random_mat(rng, d, d), b[i] = random_mat(rng, 1, d);
  const MatD x1 = random_mat(rng, 1, d);
  const MatD out1 = attention<double>(x1, w[0], b[0], w[1], b[1], w[2], b[2], w[3], b[3], 2);
  MatD v = x1 * w[2] + b[2];
  EXPECT_LE((out1 - (v * w[3] + b[3])).cwiseAbs().maxCoeff(), 1e-12);

  MatD x2(2, d);
  x2.row(0) = x1.row(0);
  x2.row(1) = x1.row(0);
  const MatD out2 = attention<double>(x2, w[0], b[0], w[1], b[1], w[2], b[2], w[3], b[3], 3);
  EXPECT_EQ(out2.row(0), out2.row(1));
}

TEST(LayerNorm, ZeroMeanUnitVariancePerToken) {
  Rng rng(1);
  const MatD x = random_mat(rng, 5, 32, 3.0);
  const MatD n = layer_norm<double>(x);
  for (int r = 0; r < 5; ++r) {
    EXPECT_NEAR(n.row(r).mean(), 0.0, 1e-12);
    EXPECT_NEAR(n.row(r).squaredNorm() / 32, 1.0, 1e-5);
  }
}

Modulation<double> random_modulation(Rng& rng, int d) {
  Modulation<double> m;
  for (auto* v : {&m.alpha1, &m.beta1, &m.gamma1, &m.alpha2, &m.beta2, &m.gamma2}) *v = random_mat(rng, 1, d);
  return m;
}

TEST(Block, ZeroGatesAreIdentity) {
  DiT<double> model(grad_config());
  model.init_random(5, 0.5);
  Rng rng(6);
  const MatD h = random_mat(rng, 4, 16, 2.0);
  auto mod = random_modulation(rng, 16);
  mod.alpha1.setZero();
  mod.alpha2.setZero();
  EXPECT_EQ(model.block(0, h, mod), h);
  EXPECT_EQ(model.block(1, h, mod), h);
}

TEST(Block, NeutralModulationIsPreLnTransformerBlock) {
  DiT<double> model(grad_config());
  model.init_random(7, 0.3);
  Rng rng(8);
  const MatD h = random_mat(rng, 4, 16);
  Modulation<double> mod;
  mod.alpha1 = mod.alpha2 = mod.gamma1 = mod.gamma2 = MatD::Ones(1, 16);
  mod.beta1 = mod.beta2 = MatD::Zero(1, 16);

  const auto& P = model.params();
  auto g = [&](const std::string& n) { return MatD(P.get(P.index_of("blocks.1." + n))); };
  const MatD h1 = h + attention<double>(layer_norm<double>(h), g("attn.wq"), g("attn.bq"), g("attn.wk"),
                                        g("attn.bk"), g("attn.wv"), g("attn.bv"), g("attn.wo"), g("attn.bo"), 2);
  MatD pre = layer_norm<double>(h1) * g("mlp.w1");
  pre.rowwise() += g("mlp.b1").row(0);
  MatD y = pre.unaryExpr([](double v) { return gelu(v); }) * g("mlp.w2");
  y.rowwise() += g("mlp.b2").row(0);
  EXPECT_LE((model.block(1, h, mod) - (h1 + y)).cwiseAbs().maxCoeff(), 1e-12);
}

// Fourth-order central differences (step h = 1e-4) of the loss for every
// parameter whose group name contains `filter`. The second-order stencil's
// truncation error alone exceeds 1e-4 relative on the smallest entries.
void check_gradients(DiT<double>& model, const DiTInput<double>& in, const std::vector<double>& target,
                     const std::string& filter, double tol) {
  DiTParams<double> grad;
  model.loss_and_grad(in, target, grad);
  auto& P = model.params();
  const double h = 1e-4;
  auto loss_at = [&](std::size_t i, double v) {
    const double keep = P.data[i];
    P.data[i] = v;
    const double l = model.loss(in, target);
    P.data[i] = keep;
    return l;
  };
  int checked = 0;
  for (const auto& info : P.layout) {
    if (info.name.find(filter) == std::string::npos) continue;
    double worst = 0;
    for (std::size_t i = info.offset; i < info.offset + info.size(); ++i) {
      const double x = P.data[i];
      const double fd = (8 * (loss_at(i, x + h) - loss_at(i, x - h)) - (loss_at(i, x + 2 * h) - loss_at(i, x - 2 * h))) /
                        (12 * h);
      const double an = grad.data[i];
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
      ++checked;
    }
    EXPECT_LE(worst, tol) << info.name;
  }
  EXPECT_GT(checked, 0);
}

TEST(DiTGradient, EveryParameterGroupMatchesFiniteDifferences) {
  DiT<double> model(grad_config());
  model.init_random(21, 0.3);
  const auto in = random_input<double>(model.config(), 2, 22);
  Rng rng(23);
  std::vector<double> target(in.noisy.size());
  for (auto& v : target) v = rng.normal();
  check_gradients(model, in, target, "", 1e-4);
}

TEST(DiTGradient, ModulationParametersFromAdalnZeroPlusNoise) {
  // Near the adaLN-Zero init, gates are small but the modulation path still needs exact gradients.
  DiT<double> model(grad_config());
  model.init_adaln_zero(31);
  Rng rng(32);
  for (auto& name : {"blocks.0.adaln.w", "blocks.1.adaln.w", "final.adaln.w", "final.w"}) {
    auto m = model.params().get(model.params().index_of(name));
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < m.cols(); ++c) m(r, c) = 0.2 * rng.normal();
  }
  const auto in = random_input<double>(model.config(), 2, 33);
  std::vector<double> target(in.noisy.size());
  for (auto& v : target) v = rng.normal();
  check_gradients(model, in, target, "adaln", 1e-4);
}

TEST(DiTConfig, PresetConfigurationsShapesAndTokens) {
  for (auto size : {ModelSize::Tiny, ModelSize::Small, ModelSize::Base})
    for (int p : {2, 4, 8}) {
      const auto cfg = DiTConfig::preset(size, p);
      EXPECT_EQ(cfg.tokens(), p == 2 ? 1024 : p == 4 ? 256 : 64);
      EXPECT_EQ(cfg.img_size % cfg.patch_size, 0);
      EXPECT_EQ(cfg.token_dim % cfg.heads, 0);
    }
  EXPECT_EQ(DiTConfig::preset(ModelSize::Small, 4).name(), "DiT-S-4");
  EXPECT_EQ(DiTConfig::preset(ModelSize::Tiny, 2).name(), "DiT-T-2");
  EXPECT_EQ(DiTConfig::preset(ModelSize::Base, 8).name(), "DiT-B-8");
  EXPECT_THROW(DiTConfig::preset(ModelSize::Small, 3), std::invalid_argument);
}

TEST(DiTConfig, ParameterCountsNearReferenceSizes) {
  // nominal sizes 5.5M / 32.6M / 130M
  const std::pair<ModelSize, double> refs[] = {
      {ModelSize::Tiny, 5.5e6}, {ModelSize::Small, 32.6e6}, {ModelSize::Base, 130e6}};
  for (auto [size, ref] : refs)
    for (int p : {2, 4, 8}) {
      const double n = static_cast<double>(parameter_count(DiTConfig::preset(size, p)));
      EXPECT_LE(std::abs(n - ref) / ref, 0.10) << to_string(size) << " p=" << p << " n=" << n;
    }
}

TEST(DiTConfig, InvalidConfigurationsRejected) {
  auto c = DiTConfig::desk();
  c.token_dim = 66;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = DiTConfig::desk();
  c.img_size = 18;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(parse_model_size("huge"), std::invalid_argument);
  EXPECT_EQ(parse_model_size("base"), ModelSize::Base);
}

TEST(DiTForward, TinyPresetShapes) {
  for (int p : {2, 4, 8}) {
    DiT<float> model(DiTConfig::preset(ModelSize::Tiny, p));
    model.init_adaln_zero(1);
    const auto in = random_input<float>(model.config(), 1, 2);
    const auto out = model.forward(in);
    EXPECT_EQ(out.size(), 64u * 64u);
  }
}

TEST(DiTForward, AdalnZeroBlocksAreIdentityAndDepthIndependent) {
  auto cfg = DiTConfig::desk();
  DiT<double> deep(cfg);
  deep.init_adaln_zero(4);
  // Random inputs to the final layer so the output is not trivially zero.
  Rng rng(5);
  auto fw = deep.params().get(deep.params().index_of("final.w"));
  for (int r = 0; r < fw.rows(); ++r)
    for (int c = 0; c < fw.cols(); ++c) fw(r, c) = rng.normal();

  auto shallow_cfg = cfg;
  shallow_cfg.depth = 0;
  DiT<double> shallow(shallow_cfg);
  for (const auto& info : shallow.params().layout) {
    const auto src = deep.params().get(deep.params().index_of(info.name));
    shallow.params().get(shallow.params().index_of(info.name)) = src;
  }
  const auto in = random_input<double>(cfg, 2, 6);
  EXPECT_EQ(deep.forward(in), shallow.forward(in));

  Modulation<double> mod;
  mod.alpha1 = mod.alpha2 = MatD::Zero(1, cfg.token_dim);
  mod.beta1 = mod.beta2 = mod.gamma1 = mod.gamma2 = random_mat(rng, 1, cfg.token_dim);
  const MatD h = random_mat(rng, cfg.tokens(), cfg.token_dim);
  for (int l = 0; l < cfg.depth; ++l) EXPECT_EQ(deep.block(l, h, mod), h);
}

TEST(DiTForward, ConditioningIgnoredAtInitUsedWithNonzeroGates) {
  DiT<double> model(DiTConfig::desk());
  model.init_adaln_zero(9);
  Rng rng(10);
  auto fw = model.params().get(model.params().index_of("final.w"));
  for (int r = 0; r < fw.rows(); ++r)
    for (int c = 0; c < fw.cols(); ++c) fw(r, c) = rng.normal();
  auto a = random_input<double>(model.config(), 1, 11);
  auto b = a;
  b.cond = {0.9, 0.1, 0.0, -1.0, 0.45};
  EXPECT_EQ(model.forward(a), model.forward(b));

  auto ada = model.params().get(model.params().index_of("blocks.0.adaln.w"));
  for (int r = 0; r < ada.rows(); ++r)
    for (int c = 0; c < ada.cols(); ++c) ada(r, c) = 0.1 * rng.normal();
  EXPECT_GT(max_abs_diff(model.forward(a), model.forward(b)), 1e-9);
}

TEST(DiTForward, StressStrainChannelsAreNotSymmetric) {
  DiT<double> model(DiTConfig::desk());
  model.init_random(12, 0.2);
  const auto in = random_input<double>(model.config(), 1, 13);
  auto swapped = in;
  std::swap(swapped.stress, swapped.strain);
  EXPECT_GT(max_abs_diff(model.forward(in), model.forward(swapped)), 1e-9);
}

TEST(DiTForward, BatchItemsIndependent) {
  DiT<double> model(DiTConfig::desk());
  model.init_random(14, 0.2);
  const auto both = random_input<double>(model.config(), 2, 15);
  const int hw = 256;
  DiTInput<double> second;
  second.batch = 1;
  second.noisy.assign(both.noisy.begin() + hw, both.noisy.end());
  second.stress.assign(both.stress.begin() + hw, both.stress.end());
  second.strain.assign(both.strain.begin() + hw, both.strain.end());
  second.t = {both.t[1]};
  second.cond.assign(both.cond.begin() + 5, both.cond.end());
  const auto out_both = model.forward(both);
  const auto out_second = model.forward(second);
  EXPECT_LE(max_abs_diff(std::vector<double>(out_both.begin() + hw, out_both.end()), out_second), 1e-12);
}

TEST(DiTForward, NonFiniteActivationReportsLayer) {
  DiT<double> model(DiTConfig::desk());
  model.init_random(16, 0.2);
  auto in = random_input<double>(model.config(), 1, 17);
  auto w = model.params().get(model.params().index_of("blocks.2.mlp.w2"));
  w(0, 0) = std::numeric_limits<double>::infinity();
  try {
    model.forward(in);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.layer(), 2);
  }
}

TEST(DiTForward, RejectsMismatchedInput) {
  DiT<float> model(DiTConfig::desk());
  auto in = random_input<float>(model.config(), 1, 1);
  in.stress.pop_back();
  EXPECT_THROW(model.forward(in), std::invalid_argument);
}

TEST(DiTForward, InitialLossNearUnitOnNoiseTargets) {
  DiT<float> model(DiTConfig::desk());
  model.init_adaln_zero(18);
  Rng rng(19);
  double total = 0;
  const int draws = 1000;
  for (int k = 0; k < draws; ++k) {
    auto in = random_input<float>(model.config(), 1, 100 + k);
    std::vector<float> eps(in.noisy.size());
    for (auto& v : eps) v = static_cast<float>(rng.normal());
    total += model.loss(in, eps);
  }
  EXPECT_NEAR(total / draws, 1.0, 0.2);
}

}  // namespace
