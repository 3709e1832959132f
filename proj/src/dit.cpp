#include "topoforge/dit.hpp"

#include <algorithm>
#include <cmath>

#include "topoforge/rng.hpp"

namespace topoforge::dit {

namespace {

template <typename S>
using Row = Eigen::Matrix<S, 1, Eigen::Dynamic>;

constexpr double kLnEps = 1e-6;

template <typename S>
S silu(S x) {
  return x / (S(1) + std::exp(-x));
}

template <typename S>
S silu_grad(S x) {
  const S s = S(1) / (S(1) + std::exp(-x));
  return s * (S(1) + x * (S(1) - s));
}

template <typename S>
S gelu_grad(S x) {
  const S c = static_cast<S>(0.7978845608028654);  // sqrt(2 / pi)
  const S u = c * (x + S(0.044715) * x * x * x);
  const S th = std::tanh(u);
  return S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th * th) * c * (S(1) + S(3 * 0.044715) * x * x);
}

template <typename S>
Mat<S> unary(const Mat<S>& x, S (*f)(S)) {
  return x.unaryExpr([f](S v) { return f(v); });
}

// rows [b N, (b+1) N) of x scaled / shifted by row b of g and s.
template <typename S>
Mat<S> modulate(const Mat<S>& x, const Mat<S>& gamma, const Mat<S>& shift, int N) {
  Mat<S> out(x.rows(), x.cols());
  for (int b = 0; b < gamma.rows(); ++b)
    for (int n = 0; n < N; ++n) {
      const int r = b * N + n;
      out.row(r) = x.row(r).cwiseProduct(gamma.row(b)) + shift.row(b);
    }
  return out;
}

template <typename S>
Mat<S> gate(const Mat<S>& x, const Mat<S>& g, int N) {
  Mat<S> out(x.rows(), x.cols());
  for (int b = 0; b < g.rows(); ++b)
    for (int n = 0; n < N; ++n) out.row(b * N + n) = x.row(b * N + n).cwiseProduct(g.row(b));
  return out;
}

// Per-sample sum over token rows of a (B N x d) matrix -> B x d.
template <typename S>
Mat<S> sum_tokens(const Mat<S>& x, int B, int N) {
  Mat<S> out = Mat<S>::Zero(B, x.cols());
  for (int b = 0; b < B; ++b) out.row(b) = x.middleRows(b * N, N).colwise().sum();
  return out;
}

template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& n, const std::vector<S>& rstd, const Mat<S>& dn) {
  Mat<S> dx(n.rows(), n.cols());
  const S inv_d = S(1) / static_cast<S>(n.cols());
  for (int r = 0; r < n.rows(); ++r) {
    const S mean_dn = dn.row(r).sum() * inv_d;
    const S mean_dnn = dn.row(r).dot(n.row(r)) * inv_d;
    dx.row(r) = rstd[r] * (dn.row(r).array() - mean_dn - n.row(r).array() * mean_dnn).matrix();
  }
  return dx;
}

template <typename S>
void add_bias(Mat<S>& x, const Eigen::Map<const Mat<S>>& b) {
  x.rowwise() += b.row(0);
}

template <typename S>
void check_finite(const Mat<S>& x, const char* where, int layer) {
  if (!x.allFinite()) throw NumericError(where, layer);
}

}  // namespace

// ---------------------------------------------------------------- config

std::string to_string(ModelSize s) {
  switch (s) {
    case ModelSize::Tiny: return "tiny";
    case ModelSize::Small: return "small";
    case ModelSize::Base: return "base";
    case ModelSize::Custom: return "custom";
  }
  return "custom";
}

ModelSize parse_model_size(const std::string& s) {
  if (s == "tiny") return ModelSize::Tiny;
  if (s == "small") return ModelSize::Small;
  if (s == "base") return ModelSize::Base;
  throw std::invalid_argument("unknown model size '" + s + "' (expected tiny, small or base)");
}

DiTConfig DiTConfig::preset(ModelSize size, int patch_size, int img_size) {
  if (patch_size != 2 && patch_size != 4 && patch_size != 8)
    throw std::invalid_argument("patch size " + std::to_string(patch_size) + " not in {2, 4, 8}");
  DiTConfig c;
  c.img_size = img_size;
  c.patch_size = patch_size;
  c.size = size;
  switch (size) {
    case ModelSize::Tiny: c.depth = 8, c.token_dim = 192, c.heads = 3; break;
    case ModelSize::Small: c.depth = 12, c.token_dim = 384, c.heads = 6; break;
    case ModelSize::Base: c.depth = 12, c.token_dim = 768, c.heads = 12; break;
    case ModelSize::Custom: throw std::invalid_argument("custom size has no preset");
  }
  return c;
}

DiTConfig DiTConfig::desk() {
  DiTConfig c;
  c.img_size = 16;
  c.patch_size = 4;
  c.depth = 4;
  c.token_dim = 64;
  c.heads = 4;
  c.size = ModelSize::Custom;
  return c;
}

void DiTConfig::validate() const {
  if (img_size < 1 || patch_size < 1 || img_size % patch_size != 0)
    throw std::invalid_argument("img_size " + std::to_string(img_size) + " not divisible by patch size " +
                                std::to_string(patch_size));
  if (heads < 1 || token_dim < 1 || token_dim % heads != 0)
    throw std::invalid_argument("token_dim must be a positive multiple of heads");
  if (depth < 0 || mlp_ratio < 1 || in_channels != 3 || out_channels != 1 || cond_dim < 1)
    throw std::invalid_argument("invalid DiT configuration");
  if (freq_dim < 2 || freq_dim % 2 != 0) throw std::invalid_argument("freq_dim must be even");
}

std::string DiTConfig::name() const {
  if (size == ModelSize::Custom)
    return "DiT-custom-d" + std::to_string(token_dim) + "x" + std::to_string(depth) + "-" +
           std::to_string(patch_size);
  const char letter = size == ModelSize::Tiny ? 'T' : size == ModelSize::Small ? 'S' : 'B';
  return std::string("DiT-") + letter + "-" + std::to_string(patch_size);
}

std::vector<ParamInfo> param_layout(const DiTConfig& cfg) {
  cfg.validate();
  const int d = cfg.token_dim, h = cfg.mlp_ratio * d;
  std::vector<ParamInfo> out;
  std::size_t offset = 0;
  auto add = [&](std::string name, int rows, int cols) {
    out.push_back({std::move(name), rows, cols, offset});
    offset += static_cast<std::size_t>(rows) * cols;
  };
  add("patch_embed.w", cfg.patch_features(), d);
  add("patch_embed.b", 1, d);
  add("t_embed.w1", cfg.freq_dim, d);
  add("t_embed.b1", 1, d);
  add("t_embed.w2", d, d);
  add("t_embed.b2", 1, d);
  add("c_embed.w1", cfg.cond_dim, d);
  add("c_embed.b1", 1, d);
  add("c_embed.w2", d, d);
  add("c_embed.b2", 1, d);
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    add(p + "adaln.w", d, 6 * d);
    add(p + "adaln.b", 1, 6 * d);
    for (const char* m : {"q", "k", "v", "o"}) {
      add(p + "attn.w" + m, d, d);
      add(p + "attn.b" + m, 1, d);
    }
    add(p + "mlp.w1", d, h);
    add(p + "mlp.b1", 1, h);
    add(p + "mlp.w2", h, d);
    add(p + "mlp.b2", 1, d);
  }
  add("final.adaln.w", d, 2 * d);
  add("final.adaln.b", 1, 2 * d);
  add("final.w", d, cfg.patch_size * cfg.patch_size * cfg.out_channels);
  add("final.b", 1, cfg.patch_size * cfg.patch_size * cfg.out_channels);
  return out;
}

std::uint64_t parameter_count(const DiTConfig& cfg) {
  const auto layout = param_layout(cfg);
  return layout.back().offset + layout.back().size();
}

template <typename S>
DiTParams<S>::DiTParams(const DiTConfig& cfg) : layout(param_layout(cfg)) {
  data.assign(layout.back().offset + layout.back().size(), S(0));
}

template <typename S>
std::size_t DiTParams<S>::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (layout[i].name == name) return i;
  throw std::out_of_range("no parameter named " + name);
}

// ---------------------------------------------------------------- primitives

template <typename S>
Mat<S> patchify(const std::vector<const S*>& channels, int img, int P) {
  const int G = img / P, C = static_cast<int>(channels.size());
  Mat<S> out(G * G, C * P * P);
  for (int gy = 0; gy < G; ++gy)
    for (int gx = 0; gx < G; ++gx)
      for (int c = 0; c < C; ++c)
        for (int py = 0; py < P; ++py)
          for (int px = 0; px < P; ++px)
            out(gy * G + gx, c * P * P + py * P + px) = channels[c][(gy * P + py) * img + gx * P + px];
  return out;
}

template <typename S>
void unpatchify(const Mat<S>& tokens, int img, int P, int C, S* out) {
  const int G = img / P;
  for (int gy = 0; gy < G; ++gy)
    for (int gx = 0; gx < G; ++gx)
      for (int c = 0; c < C; ++c)
        for (int py = 0; py < P; ++py)
          for (int px = 0; px < P; ++px)
            out[c * img * img + (gy * P + py) * img + gx * P + px] = tokens(gy * G + gx, c * P * P + py * P + px);
}

template <typename S>
Mat<S> positional_embedding(int grid, int dim) {
  // Half the width encodes the row, half the column; each half is [sin, cos].
  Mat<S> out(grid * grid, dim);
  const int half = dim / 2, quarter = half / 2;
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      const int n = gy * grid + gx;
      for (int axis = 0; axis < 2; ++axis) {
        const double pos = axis == 0 ? gy : gx;
        for (int k = 0; k < quarter; ++k) {
          const double w = std::pow(10000.0, -static_cast<double>(k) / std::max(quarter, 1));
          out(n, axis * half + k) = static_cast<S>(std::sin(pos * w));
          out(n, axis * half + quarter + k) = static_cast<S>(std::cos(pos * w));
        }
        for (int k = 2 * quarter; k < half; ++k) out(n, axis * half + k) = S(0);
      }
      for (int k = 2 * half; k < dim; ++k) out(n, k) = S(0);
    }
  return out;
}

template <typename S>
Mat<S> timestep_features(const std::vector<double>& t, int dim) {
  const int half = dim / 2;
  Mat<S> out(static_cast<int>(t.size()), dim);
  for (int b = 0; b < static_cast<int>(t.size()); ++b)
    for (int k = 0; k < half; ++k) {
      const double w = std::exp(-std::log(10000.0) * k / half);
      out(b, k) = static_cast<S>(std::cos(t[b] * w));
      out(b, half + k) = static_cast<S>(std::sin(t[b] * w));
    }
  return out;
}

template <typename S>
Mat<S> layer_norm(const Mat<S>& x, std::vector<S>* rstd) {
  Mat<S> out(x.rows(), x.cols());
  if (rstd) rstd->resize(x.rows());
  for (int r = 0; r < x.rows(); ++r) {
    const S mean = x.row(r).mean();
    const S var = (x.row(r).array() - mean).square().mean();
    const S rs = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
    out.row(r) = ((x.row(r).array() - mean) * rs).matrix();
    if (rstd) (*rstd)[r] = rs;
  }
  return out;
}

template <typename S>
S gelu(S x) {
  const S c = static_cast<S>(0.7978845608028654);
  return S(0.5) * x * (S(1) + std::tanh(c * (x + S(0.044715) * x * x * x)));
}

template <typename S>
static void softmax_rows(Mat<S>& s) {
  for (int r = 0; r < s.rows(); ++r) {
    const S m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp().matrix();
    s.row(r) /= s.row(r).sum();
  }
}

template <typename S>
Mat<S> attention(const Mat<S>& x, const Mat<S>& wq, const Mat<S>& bq, const Mat<S>& wk, const Mat<S>& bk,
                 const Mat<S>& wv, const Mat<S>& bv, const Mat<S>& wo, const Mat<S>& bo, int heads) {
  const int N = static_cast<int>(x.rows()), d = static_cast<int>(x.cols()), dk = d / heads;
  Mat<S> q = x * wq, k = x * wk, v = x * wv;
  q.rowwise() += bq.row(0);
  k.rowwise() += bk.row(0);
  v.rowwise() += bv.row(0);
  Mat<S> o(N, d);
  const S scale = S(1) / std::sqrt(static_cast<S>(dk));
  for (int h = 0; h < heads; ++h) {
    Mat<S> s = q.middleCols(h * dk, dk) * k.middleCols(h * dk, dk).transpose() * scale;
    softmax_rows(s);
    o.middleCols(h * dk, dk) = s * v.middleCols(h * dk, dk);
  }
  Mat<S> out = o * wo;
  out.rowwise() += bo.row(0);
  return out;
}

// ---------------------------------------------------------------- model

template <typename S>
struct DiT<S>::Cache {
  struct Block {
    Mat<S> x_in, n1, m1, q, k, v, o, a, h_mid, n2, m2, pre1, z, y;
    Mat<S> shift1, gamma1, gate1, shift2, gamma2, gate2;
    std::vector<S> rstd1, rstd2;
    std::vector<Mat<S>> probs;  // b * heads + h
  };
  Mat<S> X, tf, t_pre, t_act, c_pre, c_act, cond, sc;
  std::vector<Block> blocks;
  Mat<S> h_last, nf, mf, f_shift, f_gamma;
  std::vector<S> rstdf;
};

template <typename S>
DiT<S>::DiT(DiTConfig cfg) : cfg_(std::move(cfg)), params_(cfg_) {
  pos_ = positional_embedding<S>(cfg_.grid(), cfg_.token_dim);
  build_indices();
}

template <typename S>
void DiT<S>::build_indices() {
  const auto& p = params_;
  pe_w_ = p.index_of("patch_embed.w");
  pe_b_ = pe_w_ + 1;
  t_w1_ = p.index_of("t_embed.w1");
  t_b1_ = t_w1_ + 1;
  t_w2_ = t_w1_ + 2;
  t_b2_ = t_w1_ + 3;
  c_w1_ = p.index_of("c_embed.w1");
  c_b1_ = c_w1_ + 1;
  c_w2_ = c_w1_ + 2;
  c_b2_ = c_w1_ + 3;
  blocks_.clear();
  for (int l = 0; l < cfg_.depth; ++l) {
    const std::size_t base = p.index_of("blocks." + std::to_string(l) + ".adaln.w");
    BlockIdx b;
    b.ada_w = base;
    b.ada_b = base + 1;
    b.wq = base + 2, b.bq = base + 3, b.wk = base + 4, b.bk = base + 5;
    b.wv = base + 6, b.bv = base + 7, b.wo = base + 8, b.bo = base + 9;
    b.w1 = base + 10, b.b1 = base + 11, b.w2 = base + 12, b.b2 = base + 13;
    blocks_.push_back(b);
  }
  f_ada_w_ = p.index_of("final.adaln.w");
  f_ada_b_ = f_ada_w_ + 1;
  f_w_ = f_ada_w_ + 2;
  f_b_ = f_ada_w_ + 3;
}

template <typename S>
void DiT<S>::init_adaln_zero(std::uint64_t seed) {
  Rng rng(seed);
  params_.set_zero();
  auto xavier_init = [&](std::size_t i) {
    auto m = params_.get(i);
    const double bound = std::sqrt(6.0 / (m.rows() + m.cols()));
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < m.cols(); ++c) m(r, c) = static_cast<S>(rng.uniform(-bound, bound));
  };
  auto normal_init = [&](std::size_t i, double sd) {
    auto m = params_.get(i);
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < m.cols(); ++c) m(r, c) = static_cast<S>(sd * rng.normal());
  };
  xavier_init(pe_w_);
  for (auto i : {t_w1_, t_w2_, c_w1_, c_w2_}) normal_init(i, 0.02);
  for (const auto& b : blocks_)
    for (auto i : {b.wq, b.wk, b.wv, b.wo, b.w1, b.w2}) xavier_init(i);
  // adaLN and final layers stay zero.
}

template <typename S>
void DiT<S>::init_random(std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto& v : params_.data) v = static_cast<S>(scale * rng.normal());
}

template <typename S>
Mat<S> DiT<S>::block(int layer, const Mat<S>& h, const Modulation<S>& mod) const {
  const auto& bi = blocks_.at(layer);
  const auto& P = params_;
  const Mat<S> m1 = modulate<S>(layer_norm<S>(h), Mat<S>(mod.gamma1), Mat<S>(mod.beta1), h.rows());
  const Mat<S> a = attention<S>(m1, P.get(bi.wq), P.get(bi.bq), P.get(bi.wk), P.get(bi.bk), P.get(bi.wv),
                                P.get(bi.bv), P.get(bi.wo), P.get(bi.bo), cfg_.heads);
  const Mat<S> h_mid = h + gate<S>(a, Mat<S>(mod.alpha1), h.rows());
  const Mat<S> m2 = modulate<S>(layer_norm<S>(h_mid), Mat<S>(mod.gamma2), Mat<S>(mod.beta2), h.rows());
  Mat<S> pre = m2 * P.get(bi.w1);
  add_bias<S>(pre, P.get(bi.b1));
  Mat<S> y = unary<S>(pre, &gelu<S>) * P.get(bi.w2);
  add_bias<S>(y, P.get(bi.b2));
  return h_mid + gate<S>(y, Mat<S>(mod.alpha2), h.rows());
}

template <typename S>
std::vector<S> DiT<S>::run(const DiTInput<S>& in, Cache* cache) const {
  const int B = in.batch, N = cfg_.tokens(), d = cfg_.token_dim, img = cfg_.img_size, HW = img * img;
  const int heads = cfg_.heads, dk = cfg_.head_dim();
  if (B < 1) throw std::invalid_argument("empty batch");
  const std::size_t px = static_cast<std::size_t>(B) * HW;
  if (in.noisy.size() != px || in.stress.size() != px || in.strain.size() != px)
    throw std::invalid_argument("input grids do not match " + std::to_string(img) + "x" + std::to_string(img) +
                                " x batch " + std::to_string(B));
  if (in.t.size() != static_cast<std::size_t>(B) || in.cond.size() != static_cast<std::size_t>(B) * cfg_.cond_dim)
    throw std::invalid_argument("timestep / conditioning batch size mismatch");
  const auto& P = params_;

  // Patch tokens for every sample.
  Mat<S> X(B * N, cfg_.patch_features());
  std::vector<S> fields;
  for (int b = 0; b < B; ++b) {
    const S* st = in.stress.data() + static_cast<std::size_t>(b) * HW;
    const S* sn = in.strain.data() + static_cast<std::size_t>(b) * HW;
    if (cfg_.log1p_fields) {
      fields.resize(2 * HW);
      for (int i = 0; i < HW; ++i) {
        fields[i] = std::log1p(st[i]);
        fields[HW + i] = std::log1p(sn[i]);
      }
      st = fields.data();
      sn = fields.data() + HW;
    }
    X.middleRows(b * N, N) = patchify<S>({in.noisy.data() + static_cast<std::size_t>(b) * HW, st, sn}, img,
                                         cfg_.patch_size);
  }
  Mat<S> h = X * P.get(pe_w_);
  add_bias<S>(h, P.get(pe_b_));
  for (int b = 0; b < B; ++b) h.middleRows(b * N, N) += pos_;

  // Modulation input: time embedding + descriptor embedding.
  const Mat<S> tf = timestep_features<S>(in.t, cfg_.freq_dim);
  Mat<S> t_pre = tf * P.get(t_w1_);
  add_bias<S>(t_pre, P.get(t_b1_));
  const Mat<S> t_act = unary<S>(t_pre, &silu<S>);
  Mat<S> cond = t_act * P.get(t_w2_);
  add_bias<S>(cond, P.get(t_b2_));
  const Eigen::Map<const Mat<S>> cin(in.cond.data(), B, cfg_.cond_dim);
  Mat<S> c_pre = cin * P.get(c_w1_);
  add_bias<S>(c_pre, P.get(c_b1_));
  const Mat<S> c_act = unary<S>(c_pre, &silu<S>);
  Mat<S> c_emb = c_act * P.get(c_w2_);
  add_bias<S>(c_emb, P.get(c_b2_));
  cond += c_emb;
  const Mat<S> sc = unary<S>(cond, &silu<S>);
  check_finite(sc, "conditioning embedding", -1);

  if (cache) {
    cache->X = X;
    cache->tf = tf;
    cache->t_pre = t_pre;
    cache->t_act = t_act;
    cache->c_pre = c_pre;
    cache->c_act = c_act;
    cache->cond = cond;
    cache->sc = sc;
    cache->blocks.assign(cfg_.depth, {});
  }
  const S scale = S(1) / std::sqrt(static_cast<S>(dk));

  for (int l = 0; l < cfg_.depth; ++l) {
    const auto& bi = blocks_[l];
    Mat<S> mod = sc * P.get(bi.ada_w);
    add_bias<S>(mod, P.get(bi.ada_b));
    const Mat<S> shift1 = mod.middleCols(0, d), gamma1 = (mod.middleCols(d, d).array() + S(1)).matrix(),
                 gate1 = mod.middleCols(2 * d, d), shift2 = mod.middleCols(3 * d, d),
                 gamma2 = (mod.middleCols(4 * d, d).array() + S(1)).matrix(), gate2 = mod.middleCols(5 * d, d);

    std::vector<S> rstd1, rstd2;
    const Mat<S> n1 = layer_norm<S>(h, &rstd1);
    const Mat<S> m1 = modulate<S>(n1, gamma1, shift1, N);
    Mat<S> q = m1 * P.get(bi.wq), k = m1 * P.get(bi.wk), v = m1 * P.get(bi.wv);
    add_bias<S>(q, P.get(bi.bq));
    add_bias<S>(k, P.get(bi.bk));
    add_bias<S>(v, P.get(bi.bv));
    Mat<S> o(B * N, d);
    std::vector<Mat<S>> probs;
    if (cache) probs.reserve(static_cast<std::size_t>(B) * heads);
    for (int b = 0; b < B; ++b)
      for (int hh = 0; hh < heads; ++hh) {
        Mat<S> s = q.block(b * N, hh * dk, N, dk) * k.block(b * N, hh * dk, N, dk).transpose() * scale;
        softmax_rows(s);
        o.block(b * N, hh * dk, N, dk) = s * v.block(b * N, hh * dk, N, dk);
        if (cache) probs.push_back(std::move(s));
      }
    Mat<S> a = o * P.get(bi.wo);
    add_bias<S>(a, P.get(bi.bo));
    Mat<S> h_mid = h + gate<S>(a, gate1, N);
    const Mat<S> n2 = layer_norm<S>(h_mid, &rstd2);
    const Mat<S> m2 = modulate<S>(n2, gamma2, shift2, N);
    Mat<S> pre1 = m2 * P.get(bi.w1);
    add_bias<S>(pre1, P.get(bi.b1));
    Mat<S> z = unary<S>(pre1, &gelu<S>);
    Mat<S> y = z * P.get(bi.w2);
    add_bias<S>(y, P.get(bi.b2));
    Mat<S> h_out = h_mid + gate<S>(y, gate2, N);
    check_finite(h_out, "transformer block", l);

    if (cache) {
      auto& c = cache->blocks[l];
      c.x_in = std::move(h);
      c.n1 = n1;
      c.m1 = m1;
      c.q = std::move(q);
      c.k = std::move(k);
      c.v = std::move(v);
      c.o = std::move(o);
      c.a = std::move(a);
      c.h_mid = std::move(h_mid);
      c.n2 = n2;
      c.m2 = m2;
      c.pre1 = std::move(pre1);
      c.z = std::move(z);
      c.y = std::move(y);
      c.shift1 = shift1, c.gamma1 = gamma1, c.gate1 = gate1;
      c.shift2 = shift2, c.gamma2 = gamma2, c.gate2 = gate2;
      c.rstd1 = std::move(rstd1);
      c.rstd2 = std::move(rstd2);
      c.probs = std::move(probs);
    }
    h = std::move(h_out);
  }

  Mat<S> fmod = sc * P.get(f_ada_w_);
  add_bias<S>(fmod, P.get(f_ada_b_));
  const Mat<S> f_shift = fmod.middleCols(0, d), f_gamma = (fmod.middleCols(d, d).array() + S(1)).matrix();
  std::vector<S> rstdf;
  const Mat<S> nf = layer_norm<S>(h, &rstdf);
  const Mat<S> mf = modulate<S>(nf, f_gamma, f_shift, N);
  Mat<S> out_tokens = mf * P.get(f_w_);
  add_bias<S>(out_tokens, P.get(f_b_));
  check_finite(out_tokens, "final layer", -1);
  if (cache) {
    cache->h_last = std::move(h);
    cache->nf = nf;
    cache->mf = mf;
    cache->f_shift = f_shift;
    cache->f_gamma = f_gamma;
    cache->rstdf = std::move(rstdf);
  }

  std::vector<S> out(static_cast<std::size_t>(B) * HW);
  for (int b = 0; b < B; ++b)
    unpatchify<S>(Mat<S>(out_tokens.middleRows(b * N, N)), img, cfg_.patch_size, cfg_.out_channels,
                  out.data() + static_cast<std::size_t>(b) * HW);
  return out;
}

template <typename S>
std::vector<S> DiT<S>::forward(const DiTInput<S>& in) const {
  return run(in, nullptr);
}

template <typename S>
S DiT<S>::loss(const DiTInput<S>& in, const std::vector<S>& target) const {
  const auto out = run(in, nullptr);
  if (target.size() != out.size()) throw std::invalid_argument("target size mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < out.size(); ++i) acc += static_cast<double>(out[i] - target[i]) * (out[i] - target[i]);
  return static_cast<S>(acc / static_cast<double>(out.size()));
}

template <typename S>
S DiT<S>::loss_and_grad(const DiTInput<S>& in, const std::vector<S>& target, DiTParams<S>& grad) const {
  Cache cache;
  const auto out = run(in, &cache);
  if (target.size() != out.size()) throw std::invalid_argument("target size mismatch");
  const int B = in.batch, N = cfg_.tokens(), img = cfg_.img_size, HW = img * img;
  double acc = 0;
  std::vector<S> d_out(out.size());
  const S norm = S(2) / static_cast<S>(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const S e = out[i] - target[i];
    acc += static_cast<double>(e) * e;
    d_out[i] = norm * e;
  }
  Mat<S> d_tokens(B * N, cfg_.patch_size * cfg_.patch_size * cfg_.out_channels);
  for (int b = 0; b < B; ++b)
    d_tokens.middleRows(b * N, N) =
        patchify<S>({d_out.data() + static_cast<std::size_t>(b) * HW}, img, cfg_.patch_size);
  if (grad.layout.size() != params_.layout.size()) grad = DiTParams<S>(cfg_);
  grad.set_zero();
  backward(in, cache, d_tokens, grad);
  return static_cast<S>(acc / static_cast<double>(out.size()));
}

template <typename S>
void DiT<S>::backward(const DiTInput<S>& in, const Cache& c, const Mat<S>& d_out, DiTParams<S>& g) const {
  const int B = in.batch, N = cfg_.tokens(), d = cfg_.token_dim, heads = cfg_.heads, dk = cfg_.head_dim();
  const auto& P = params_;
  const S scale = S(1) / std::sqrt(static_cast<S>(dk));

  // Final layer.
  g.get(f_w_) += c.mf.transpose() * d_out;
  g.get(f_b_) += d_out.colwise().sum();
  const Mat<S> d_mf = d_out * P.get(f_w_).transpose();
  Mat<S> d_fmod(B, 2 * d);
  d_fmod.middleCols(0, d) = sum_tokens<S>(d_mf, B, N);
  d_fmod.middleCols(d, d) = sum_tokens<S>(Mat<S>(d_mf.cwiseProduct(c.nf)), B, N);
  const Mat<S> d_nf = modulate<S>(d_mf, c.f_gamma, Mat<S>::Zero(B, d), N);
  Mat<S> dh = layer_norm_backward<S>(c.nf, c.rstdf, d_nf);
  g.get(f_ada_w_) += c.sc.transpose() * d_fmod;
  g.get(f_ada_b_) += d_fmod.colwise().sum();
  Mat<S> d_sc = d_fmod * P.get(f_ada_w_).transpose();

  for (int l = cfg_.depth - 1; l >= 0; --l) {
    const auto& bi = blocks_[l];
    const auto& k = c.blocks[l];
    Mat<S> d_mod(B, 6 * d);

    // MLP branch: h_out = h_mid + gate2 * y
    const Mat<S> dy = gate<S>(dh, k.gate2, N);
    d_mod.middleCols(5 * d, d) = sum_tokens<S>(Mat<S>(dh.cwiseProduct(k.y)), B, N);
    g.get(bi.w2) += k.z.transpose() * dy;
    g.get(bi.b2) += dy.colwise().sum();
    const Mat<S> dz = dy * P.get(bi.w2).transpose();
    const Mat<S> dpre = dz.cwiseProduct(unary<S>(k.pre1, &gelu_grad<S>));
    g.get(bi.w1) += k.m2.transpose() * dpre;
    g.get(bi.b1) += dpre.colwise().sum();
    const Mat<S> dm2 = dpre * P.get(bi.w1).transpose();
    d_mod.middleCols(3 * d, d) = sum_tokens<S>(dm2, B, N);
    d_mod.middleCols(4 * d, d) = sum_tokens<S>(Mat<S>(dm2.cwiseProduct(k.n2)), B, N);
    const Mat<S> dn2 = modulate<S>(dm2, k.gamma2, Mat<S>::Zero(B, d), N);
    const Mat<S> dh_mid = dh + layer_norm_backward<S>(k.n2, k.rstd2, dn2);

    // Attention branch: h_mid = x_in + gate1 * a
    const Mat<S> da = gate<S>(dh_mid, k.gate1, N);
    d_mod.middleCols(2 * d, d) = sum_tokens<S>(Mat<S>(dh_mid.cwiseProduct(k.a)), B, N);
    g.get(bi.wo) += k.o.transpose() * da;
    g.get(bi.bo) += da.colwise().sum();
    const Mat<S> d_o = da * P.get(bi.wo).transpose();
    Mat<S> dq(B * N, d), dkm(B * N, d), dv(B * N, d);
    for (int b = 0; b < B; ++b)
      for (int hh = 0; hh < heads; ++hh) {
        const Mat<S>& pr = k.probs[static_cast<std::size_t>(b) * heads + hh];
        const Mat<S> d_ob = d_o.block(b * N, hh * dk, N, dk);
        const Mat<S> dP = d_ob * k.v.block(b * N, hh * dk, N, dk).transpose();
        dv.block(b * N, hh * dk, N, dk) = pr.transpose() * d_ob;
        Mat<S> dS = pr.cwiseProduct(
            (dP.colwise() - dP.cwiseProduct(pr).rowwise().sum()));
        dS *= scale;
        dq.block(b * N, hh * dk, N, dk) = dS * k.k.block(b * N, hh * dk, N, dk);
        dkm.block(b * N, hh * dk, N, dk) = dS.transpose() * k.q.block(b * N, hh * dk, N, dk);
      }
    g.get(bi.wq) += k.m1.transpose() * dq;
    g.get(bi.bq) += dq.colwise().sum();
    g.get(bi.wk) += k.m1.transpose() * dkm;
    g.get(bi.bk) += dkm.colwise().sum();
    g.get(bi.wv) += k.m1.transpose() * dv;
    g.get(bi.bv) += dv.colwise().sum();
    const Mat<S> dm1 =
        dq * P.get(bi.wq).transpose() + dkm * P.get(bi.wk).transpose() + dv * P.get(bi.wv).transpose();
    d_mod.middleCols(0, d) = sum_tokens<S>(dm1, B, N);
    d_mod.middleCols(d, d) = sum_tokens<S>(Mat<S>(dm1.cwiseProduct(k.n1)), B, N);
    const Mat<S> dn1 = modulate<S>(dm1, k.gamma1, Mat<S>::Zero(B, d), N);
    dh = dh_mid + layer_norm_backward<S>(k.n1, k.rstd1, dn1);

    g.get(bi.ada_w) += c.sc.transpose() * d_mod;
    g.get(bi.ada_b) += d_mod.colwise().sum();
    d_sc += d_mod * P.get(bi.ada_w).transpose();
  }

  // Conditioning path.
  const Mat<S> d_cond = d_sc.cwiseProduct(unary<S>(c.cond, &silu_grad<S>));
  g.get(t_w2_) += c.t_act.transpose() * d_cond;
  g.get(t_b2_) += d_cond.colwise().sum();
  const Mat<S> d_tpre = (d_cond * P.get(t_w2_).transpose()).cwiseProduct(unary<S>(c.t_pre, &silu_grad<S>));
  g.get(t_w1_) += c.tf.transpose() * d_tpre;
  g.get(t_b1_) += d_tpre.colwise().sum();
  g.get(c_w2_) += c.c_act.transpose() * d_cond;
  g.get(c_b2_) += d_cond.colwise().sum();
  const Mat<S> d_cpre = (d_cond * P.get(c_w2_).transpose()).cwiseProduct(unary<S>(c.c_pre, &silu_grad<S>));
  const Eigen::Map<const Mat<S>> cin(in.cond.data(), B, cfg_.cond_dim);
  g.get(c_w1_) += cin.transpose() * d_cpre;
  g.get(c_b1_) += d_cpre.colwise().sum();

  // Patch embedding.
  g.get(pe_w_) += c.X.transpose() * dh;
  g.get(pe_b_) += dh.colwise().sum();
}

template struct DiTParams<float>;
template struct DiTParams<double>;
template class DiT<float>;
template class DiT<double>;
template Mat<float> patchify<float>(const std::vector<const float*>&, int, int);
template Mat<double> patchify<double>(const std::vector<const double*>&, int, int);
template void unpatchify<float>(const Mat<float>&, int, int, int, float*);
template void unpatchify<double>(const Mat<double>&, int, int, int, double*);
template Mat<float> positional_embedding<float>(int, int);
template Mat<double> positional_embedding<double>(int, int);
template Mat<float> timestep_features<float>(const std::vector<double>&, int);
template Mat<double> timestep_features<double>(const std::vector<double>&, int);
template Mat<float> layer_norm<float>(const Mat<float>&, std::vector<float>*);
template Mat<double> layer_norm<double>(const Mat<double>&, std::vector<double>*);
template float gelu<float>(float);
template double gelu<double>(double);
template Mat<float> attention<float>(const Mat<float>&, const Mat<float>&, const Mat<float>&, const Mat<float>&,
                                     const Mat<float>&, const Mat<float>&, const Mat<float>&, const Mat<float>&,
                                     const Mat<float>&, int);
template Mat<double> attention<double>(const Mat<double>&, const Mat<double>&, const Mat<double>&,
                                       const Mat<double>&, const Mat<double>&, const Mat<double>&,
                                       const Mat<double>&, const Mat<double>&, const Mat<double>&, int);

}  // namespace topoforge::dit
