#include "topoforge/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "byteio.hpp"

namespace topoforge::dit {

namespace {

using io::put_le;

std::vector<std::uint32_t> config_fields(const DiTConfig& c) {
  return {static_cast<std::uint32_t>(c.img_size),  static_cast<std::uint32_t>(c.patch_size),
          static_cast<std::uint32_t>(c.in_channels), static_cast<std::uint32_t>(c.out_channels),
          static_cast<std::uint32_t>(c.depth),     static_cast<std::uint32_t>(c.token_dim),
          static_cast<std::uint32_t>(c.heads),     static_cast<std::uint32_t>(c.mlp_ratio),
          static_cast<std::uint32_t>(c.cond_dim),  static_cast<std::uint32_t>(c.freq_dim),
          c.log1p_fields ? 1u : 0u,                static_cast<std::uint32_t>(c.size)};
}

void write_floats(std::ofstream& out, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    std::string buf;
    for (std::size_t i = 0; i < n; ++i) put_le<float>(buf, data[i]);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
}

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw CheckpointError("cannot open checkpoint " + path);
  }

  template <typename T>
  T get(const char* what) {
    T v;
    if (!io::read_le(in_, v)) throw CheckpointError(path_ + ": truncated while reading " + what);
    return v;
  }

  void floats(float* out, std::size_t n, const std::string& what) {
    if (!in_.read(reinterpret_cast<char*>(out), static_cast<std::streamsize>(n * sizeof(float))))
      throw CheckpointError(path_ + ": truncated while reading " + what);
    if constexpr (std::endian::native == std::endian::big)
      for (std::size_t i = 0; i < n; ++i) {
        char* p = reinterpret_cast<char*>(out + i);
        std::reverse(p, p + sizeof(float));
      }
  }

  std::string bytes(std::size_t n, const char* what) {
    std::string s(n, '\0');
    if (!in_.read(s.data(), static_cast<std::streamsize>(n)))
      throw CheckpointError(path_ + ": truncated while reading " + what);
    return s;
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream in_;
};

Checkpoint read_header(Reader& r) {
  const std::string magic = r.bytes(8, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 8) != 0)
    throw CheckpointError(r.path() + ": magic mismatch (not a DITCKPT1 checkpoint)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError(r.path() + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  auto& c = ck.config;
  int* ints[] = {&c.img_size, &c.patch_size, &c.in_channels, &c.out_channels, &c.depth,   &c.token_dim,
                 &c.heads,    &c.mlp_ratio,  &c.cond_dim,    &c.freq_dim};
  for (int* f : ints) {
    const auto v = r.get<std::uint32_t>("config");
    if (v > (1u << 20)) throw CheckpointError(r.path() + ": implausible config field " + std::to_string(v));
    *f = static_cast<int>(v);
  }
  c.log1p_fields = r.get<std::uint32_t>("config") != 0;
  const auto size = r.get<std::uint32_t>("config");
  if (size > static_cast<std::uint32_t>(ModelSize::Custom))
    throw CheckpointError(r.path() + ": unknown model size code " + std::to_string(size));
  c.size = static_cast<ModelSize>(size);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(r.path() + ": invalid config: " + e.what());
  }
  ck.step = r.get<std::uint64_t>("step");
  ck.seed = r.get<std::uint64_t>("seed");
  ck.learning_rate = r.get<double>("learning rate");
  ck.batch_size = static_cast<int>(r.get<std::uint32_t>("batch size"));
  return ck;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const auto expected = param_layout(ck.config);
  if (ck.params.layout.size() != expected.size() || ck.params.data.size() != parameter_count(ck.config))
    throw CheckpointError("parameters do not match the checkpoint config");
  const bool moments = !ck.adam_m.empty();
  if (moments && (ck.adam_m.size() != ck.params.data.size() || ck.adam_v.size() != ck.params.data.size()))
    throw CheckpointError("optimizer moments do not match the parameter count");

  std::string head(kCheckpointMagic, 8);
  put_le<std::uint32_t>(head, kCheckpointVersion);
  for (auto v : config_fields(ck.config)) put_le<std::uint32_t>(head, v);
  put_le<std::uint64_t>(head, ck.step);
  put_le<std::uint64_t>(head, ck.seed);
  put_le<double>(head, ck.learning_rate);
  put_le<std::uint32_t>(head, static_cast<std::uint32_t>(ck.batch_size));
  put_le<std::uint32_t>(head, static_cast<std::uint32_t>(expected.size()));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp);
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto& info : ck.params.layout) {
      std::string meta;
      put_le<std::uint16_t>(meta, static_cast<std::uint16_t>(info.name.size()));
      meta += info.name;
      put_le<std::uint32_t>(meta, static_cast<std::uint32_t>(info.rows));
      put_le<std::uint32_t>(meta, static_cast<std::uint32_t>(info.cols));
      out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
      write_floats(out, ck.params.data.data() + info.offset, info.size());
    }
    std::string flag;
    put_le<std::uint32_t>(flag, moments ? 1u : 0u);
    out.write(flag.data(), static_cast<std::streamsize>(flag.size()));
    if (moments) {
      write_floats(out, ck.adam_m.data(), ck.adam_m.size());
      write_floats(out, ck.adam_v.data(), ck.adam_v.size());
    }
    out.flush();
    if (!out) throw CheckpointError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw CheckpointError("cannot move checkpoint into place at " + path);
  }
}

Checkpoint read_checkpoint_header(const std::string& path) {
  Reader r(path);
  return read_header(r);
}

Checkpoint load_checkpoint(const std::string& path) {
  Reader r(path);
  Checkpoint ck = read_header(r);
  ck.params = DiTParams<float>(ck.config);
  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != ck.params.layout.size())
    throw CheckpointError(path + ": expected " + std::to_string(ck.params.layout.size()) + " tensors, found " +
                          std::to_string(count));
  for (const auto& info : ck.params.layout) {
    const auto len = r.get<std::uint16_t>("tensor name");
    const std::string name = r.bytes(len, "tensor name");
    const auto rows = r.get<std::uint32_t>("tensor shape");
    const auto cols = r.get<std::uint32_t>("tensor shape");
    if (name != info.name || static_cast<int>(rows) != info.rows || static_cast<int>(cols) != info.cols)
      throw CheckpointError(path + ": tensor '" + name + "' " + std::to_string(rows) + "x" + std::to_string(cols) +
                            " does not match expected '" + info.name + "' " + std::to_string(info.rows) + "x" +
                            std::to_string(info.cols));
    r.floats(ck.params.data.data() + info.offset, info.size(), info.name);
  }
  if (r.get<std::uint32_t>("moment flag") != 0) {
    ck.adam_m.resize(ck.params.data.size());
    ck.adam_v.resize(ck.params.data.size());
    r.floats(ck.adam_m.data(), ck.adam_m.size(), "first moments");
    r.floats(ck.adam_v.data(), ck.adam_v.size(), "second moments");
  }
  if (!r.at_end()) throw CheckpointError(path + ": trailing bytes after the last tensor");
  for (float v : ck.params.data)
    if (!std::isfinite(v)) throw CheckpointError(path + ": non-finite parameter value");
  return ck;
}

}  // namespace topoforge::dit
