#include "topoforge/dataset.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iomanip>
#include <ostream>

#include "byteio.hpp"

namespace topoforge::dataset {

namespace {

using io::get_le;
using io::put_le;

std::string encode_header(int nx, int ny, std::uint64_t count) {
  std::string buf(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(buf, kVersion);
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(nx));
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(ny));
  put_le<std::uint64_t>(buf, count);
  return buf;
}

std::string encode_record(const Sample& s) {
  std::string buf;
  buf.reserve(record_bytes(s.nx, s.ny));
  for (const auto* grid : {&s.topology, &s.stress, &s.strain_energy})
    for (float v : *grid) put_le<float>(buf, v);
  for (float v : {s.load_x, s.load_y, s.fx, s.fy, s.volume_fraction}) put_le<float>(buf, v);
  put_le<std::uint64_t>(buf, s.seed);
  return buf;
}

}  // namespace

Sample::Sample(int nx_, int ny_)
    : nx(nx_), ny(ny_), topology(cells()), stress(cells()), strain_energy(cells()) {}

void Sample::validate() const {
  if (nx < 1 || ny < 1) throw std::invalid_argument("grid dimensions must be positive");
  if (topology.size() != cells() || stress.size() != cells() || strain_energy.size() != cells())
    throw std::invalid_argument("grid sizes do not match nx * ny");
  for (float v : topology)
    if (v != 0.0f && v != 1.0f) throw std::invalid_argument("topology is not binary");
  for (const auto* grid : {&stress, &strain_energy})
    for (float v : *grid) {
      if (!std::isfinite(v)) throw std::invalid_argument("conditioning field is not finite");
      if (v < 0.0f) throw std::invalid_argument("conditioning field is negative");
    }
  for (float v : {load_x, load_y, fx, fy, volume_fraction})
    if (!std::isfinite(v)) throw std::invalid_argument("descriptor is not finite");
  if (load_x < 0 || load_x > 1 || load_y < 0 || load_y > 1)
    throw std::invalid_argument("load coordinates outside [0, 1]");
  const double mag = std::hypot(static_cast<double>(fx), static_cast<double>(fy));
  if (std::abs(mag - 1.0) > 1e-6) throw std::invalid_argument("load is not unit magnitude");
  if (!(volume_fraction > 0 && volume_fraction < 1)) throw std::invalid_argument("volume fraction outside (0, 1)");
}

std::size_t record_bytes(int nx, int ny) {
  return 3 * static_cast<std::size_t>(nx) * ny * 4 + 5 * 4 + 8;
}

DatasetWriter::DatasetWriter(const std::string& path, int nx, int ny) : path_(path), nx_(nx), ny_(ny) {
  if (nx < 1 || ny < 1) throw DatasetError("grid dimensions must be positive");
  out_.open(path, std::ios::binary | std::ios::trunc);
  if (!out_) throw DatasetError("cannot open " + path + " for writing");
  write_header();
}

DatasetWriter::~DatasetWriter() {
  try {
    close();
  } catch (...) {
  }
}

void DatasetWriter::write_header() {
  const auto h = encode_header(nx_, ny_, count_);
  out_.write(h.data(), static_cast<std::streamsize>(h.size()));
}

void DatasetWriter::append(const Sample& s) {
  if (closed_) throw DatasetError("writer already closed");
  if (s.nx != nx_ || s.ny != ny_) throw DatasetError("sample grid does not match the dataset grid");
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw DatasetError(e.what(), static_cast<std::int64_t>(count_));
  }
  const auto rec = encode_record(s);
  out_.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  if (!out_) throw DatasetError("write failed on " + path_, static_cast<std::int64_t>(count_));
  ++count_;
}

void DatasetWriter::close() {
  if (closed_) return;
  closed_ = true;
  out_.seekp(0);
  write_header();
  out_.flush();
  const bool ok = static_cast<bool>(out_);
  out_.close();
  if (!ok) throw DatasetError("failed to finalize " + path_);
}

DatasetReader::DatasetReader(const std::string& path) : path_(path) {
  in_.open(path, std::ios::binary);
  if (!in_) throw DatasetError("cannot open " + path);
  char buf[kHeaderBytes];
  if (!in_.read(buf, kHeaderBytes)) throw DatasetError(path + ": truncated header");
  if (std::memcmp(buf, kMagic, sizeof(kMagic)) != 0) throw DatasetError(path + ": bad magic, not a TOPODIF1 file");
  header_.version = get_le<std::uint32_t>(buf + 8);
  header_.nx = get_le<std::uint32_t>(buf + 12);
  header_.ny = get_le<std::uint32_t>(buf + 16);
  header_.count = get_le<std::uint64_t>(buf + 20);
  if (header_.version != kVersion)
    throw DatasetError(path + ": unsupported version " + std::to_string(header_.version));
  if (header_.nx < 1 || header_.ny < 1 || header_.nx > 4096 || header_.ny > 4096)
    throw DatasetError(path + ": implausible grid size");
  const auto expected = kHeaderBytes + header_.count * record_bytes(header_.nx, header_.ny);
  const auto actual = std::filesystem::file_size(path);
  if (actual < expected)
    throw DatasetError(path + ": truncated, header declares " + std::to_string(header_.count) + " records (" +
                       std::to_string(expected) + " bytes) but file has " + std::to_string(actual) + " bytes");
}

Sample DatasetReader::read(std::uint64_t index) {
  const auto i = static_cast<std::int64_t>(index);
  if (index >= header_.count)
    throw DatasetError("index out of range, dataset has " + std::to_string(header_.count) + " records", i);
  const int nx = static_cast<int>(header_.nx), ny = static_cast<int>(header_.ny);
  const auto bytes = record_bytes(nx, ny);
  std::string buf(bytes, '\0');
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(kHeaderBytes + index * bytes));
  if (!in_.read(buf.data(), static_cast<std::streamsize>(bytes))) throw DatasetError("truncated record", i);

  Sample s(nx, ny);
  const char* p = buf.data();
  for (auto* grid : {&s.topology, &s.stress, &s.strain_energy})
    for (auto& v : *grid) {
      v = get_le<float>(p);
      p += 4;
    }
  for (float* v : {&s.load_x, &s.load_y, &s.fx, &s.fy, &s.volume_fraction}) {
    *v = get_le<float>(p);
    p += 4;
  }
  s.seed = get_le<std::uint64_t>(p);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw DatasetError(std::string("corrupt record: ") + e.what(), i);
  }
  return s;
}

std::uint64_t write_samples(const std::string& path, int nx, int ny, const std::vector<Sample>& samples) {
  DatasetWriter w(path, nx, ny);
  for (const auto& s : samples) w.append(s);
  w.close();
  return w.count();
}

Sample read_sample(const std::string& path, std::uint64_t index) { return DatasetReader(path).read(index); }

void export_text(const Sample& s, std::ostream& out) {
  const auto block = [&](const char* name, const std::vector<float>& grid) {
    out << "# " << name << ' ' << s.nx << ' ' << s.ny << '\n';
    for (int r = 0; r < s.ny; ++r) {
      for (int c = 0; c < s.nx; ++c) out << (c ? " " : "") << grid[static_cast<std::size_t>(r) * s.nx + c];
      out << '\n';
    }
  };
  const auto flags = out.flags();
  out << std::setprecision(9);
  block("topology", s.topology);
  block("stress", s.stress);
  block("strain_energy", s.strain_energy);
  out << "# descriptors load_x load_y fx fy f seed\n"
      << s.load_x << ' ' << s.load_y << ' ' << s.fx << ' ' << s.fy << ' ' << s.volume_fraction << ' ' << s.seed
      << "\n\n";
  out.flags(flags);
}

void export_text(const std::string& dataset_path, std::ostream& out) {
  DatasetReader r(dataset_path);
  for (std::uint64_t i = 0; i < r.size(); ++i) {
    out << "## record " << i << '\n';
    export_text(r.read(i), out);
  }
}

}  // namespace topoforge::dataset
