#pragma once

// DiT checkpoint file, little-endian:
//   "DITCKPT1", u32 version
//   config: u32 img_size, patch_size, in_channels, out_channels, depth,
//           token_dim, heads, mlp_ratio, cond_dim, freq_dim, log1p_fields, size
//   u64 step, u64 seed, f64 learning_rate, u32 batch_size
//   u32 tensor count, then per tensor: u16 name length, name, u32 rows,
//       u32 cols, rows * cols float32
//   u32 has_moments; if set, Adam first then second moments, one float32 per
//       parameter in layout order
// The training RNG is stateless (every step derives its stream from seed and
// step), so (seed, step) is the full generator state.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "topoforge/dit.hpp"

namespace topoforge::dit {

inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'T', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  DiTConfig config;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  double learning_rate = 0.0;
  int batch_size = 0;
  DiTParams<float> params;
  std::vector<float> adam_m, adam_v;  // empty when saved without optimizer state
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Writes to path + ".tmp" and renames, so a crash never leaves a torn file.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
// Header fields only (no tensors); cheap enough for directory listings.
Checkpoint read_checkpoint_header(const std::string& path);

}  // namespace topoforge::dit
