#pragma once

// Diffusion Transformer denoiser with hybrid conditioning: noisy topology,
// stress and strain are concatenated as image channels and patch-tokenized;
// the timestep and the global descriptor vector modulate every block through
// adaLN. Templated on the scalar type (float for training and sampling,
// double for gradient checks).

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace topoforge::dit {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ModelSize { Tiny, Small, Base, Custom };

struct DiTConfig {
  int img_size = 64;
  int patch_size = 4;
  int in_channels = 3;
  int out_channels = 1;
  int depth = 12;
  int token_dim = 384;
  int heads = 6;
  int mlp_ratio = 4;
  int cond_dim = 5;
  int freq_dim = 256;  // sinusoidal timestep features
  bool log1p_fields = false;  // optional log1p on the stress / strain channels
  ModelSize size = ModelSize::Small;

  static DiTConfig preset(ModelSize size, int patch_size, int img_size = 64);
  // Desk-scale reference: 16x16 grids, p = 4, d = 64, depth 4, 4 heads.
  static DiTConfig desk();

  void validate() const;
  int grid() const { return img_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int patch_features() const { return patch_size * patch_size * in_channels; }
  int head_dim() const { return token_dim / heads; }
  // "DiT-S-4" for presets, "DiT-custom-d64x4-4" otherwise.
  std::string name() const;
  bool operator==(const DiTConfig&) const = default;
};

std::string to_string(ModelSize s);
ModelSize parse_model_size(const std::string& s);  // tiny|small|base

struct ParamInfo {
  std::string name;
  int rows = 0, cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

std::vector<ParamInfo> param_layout(const DiTConfig& cfg);
std::uint64_t parameter_count(const DiTConfig& cfg);

// All weights in one flat buffer so optimizers, checkpoints and gradient
// checks can treat them uniformly. Weight matrices are (in x out); inputs are
// row vectors.
template <typename S>
struct DiTParams {
  std::vector<ParamInfo> layout;
  std::vector<S> data;

  DiTParams() = default;
  explicit DiTParams(const DiTConfig& cfg);

  Eigen::Map<Mat<S>> get(std::size_t i) {
    return {data.data() + layout[i].offset, layout[i].rows, layout[i].cols};
  }
  Eigen::Map<const Mat<S>> get(std::size_t i) const {
    return {data.data() + layout[i].offset, layout[i].rows, layout[i].cols};
  }
  std::size_t index_of(const std::string& name) const;
  void set_zero() { std::fill(data.begin(), data.end(), S(0)); }

  template <typename T>
  DiTParams<T> cast() const {
    DiTParams<T> out;
    out.layout = layout;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& where, int layer)
      : std::runtime_error("non-finite activation in " + where +
                           (layer >= 0 ? " (block " + std::to_string(layer) + ")" : std::string())),
        layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

// Model inputs for a batch; every image is img_size^2 row-major (r * W + c).
template <typename S>
struct DiTInput {
  int batch = 0;
  std::vector<S> noisy;   // topology channel in [-1, 1] plus noise
  std::vector<S> stress;  // raw
  std::vector<S> strain;  // raw
  std::vector<double> t;  // timestep per item
  std::vector<S> cond;    // batch x cond_dim: load_x, load_y, fx, fy, f
};

// Patch token layout: token n = gy * G + gx, feature (c, py, px) -> c P^2 + py P + px.
template <typename S>
Mat<S> patchify(const std::vector<const S*>& channels, int img_size, int patch);
template <typename S>
void unpatchify(const Mat<S>& tokens, int img_size, int patch, int channels, S* out);

// Fixed 2D sin-cos positional table (tokens x d).
template <typename S>
Mat<S> positional_embedding(int grid, int dim);

// Sinusoidal timestep features [cos(t w_k), sin(t w_k)], w_k = 10000^(-k / half).
template <typename S>
Mat<S> timestep_features(const std::vector<double>& t, int dim);

// Building blocks exposed for testing.
template <typename S>
Mat<S> layer_norm(const Mat<S>& x, std::vector<S>* rstd = nullptr);
template <typename S>
S gelu(S x);

// Multi-head self attention over one sequence (tokens x d) with biased
// projections: softmax(Q K^T / sqrt(d_k)) V per head, then W_O.
template <typename S>
Mat<S> attention(const Mat<S>& x, const Mat<S>& wq, const Mat<S>& bq, const Mat<S>& wk, const Mat<S>& bk,
                 const Mat<S>& wv, const Mat<S>& bv, const Mat<S>& wo, const Mat<S>& bo, int heads);

// Explicit per-block modulation: h += alpha1 * Attn(gamma1 * LN(h) + beta1);
// h += alpha2 * MLP(gamma2 * LN(h) + beta2). Each vector has width d.
template <typename S>
struct Modulation {
  Eigen::Matrix<S, 1, Eigen::Dynamic> alpha1, beta1, gamma1, alpha2, beta2, gamma2;
};

template <typename S>
class DiT {
 public:
  explicit DiT(DiTConfig cfg);

  const DiTConfig& config() const { return cfg_; }
  DiTParams<S>& params() { return params_; }
  const DiTParams<S>& params() const { return params_; }

  // adaLN-Zero: Xavier-uniform linear layers, normal(0, 0.02) embedding MLPs,
  // zero biases, and zeroed block / final modulation layers and final linear.
  void init_adaln_zero(std::uint64_t seed);
  // Every parameter (including modulation and final layers) random; used for
  // gradient checks and conditioning tests.
  void init_random(std::uint64_t seed, double scale = 0.2);

  // One block applied to a single sequence with the given modulation.
  Mat<S> block(int layer, const Mat<S>& h, const Modulation<S>& mod) const;

  // eps prediction, batch x img_size^2.
  std::vector<S> forward(const DiTInput<S>& in) const;

  // Loss 0.5-free MSE mean((eps_pred - target)^2) with gradients accumulated
  // into grad (same layout as params; overwritten).
  S loss_and_grad(const DiTInput<S>& in, const std::vector<S>& target, DiTParams<S>& grad) const;
  S loss(const DiTInput<S>& in, const std::vector<S>& target) const;

 private:
  struct Cache;
  std::vector<S> run(const DiTInput<S>& in, Cache* cache) const;
  void backward(const DiTInput<S>& in, const Cache& cache, const Mat<S>& d_out_tokens, DiTParams<S>& grad) const;
  void build_indices();

  DiTConfig cfg_;
  DiTParams<S> params_;
  Mat<S> pos_;

  struct BlockIdx {
    std::size_t ada_w, ada_b, wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2;
  };
  std::size_t pe_w_, pe_b_, t_w1_, t_b1_, t_w2_, t_b2_, c_w1_, c_b1_, c_w2_, c_b2_;
  std::size_t f_ada_w_, f_ada_b_, f_w_, f_b_;
  std::vector<BlockIdx> blocks_;
};

// Conditioning descriptor [load_x, load_y, fx, fy, f].
struct ConditioningVector {
  double load_x = 0, load_y = 0, fx = 0, fy = 0, f = 0;
};

}  // namespace topoforge::dit
