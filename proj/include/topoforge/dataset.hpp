#pragma once

// Binary sample store: a 28-byte header followed by fixed-size little-endian
// records. Layout of one record for an nx x ny grid:
//   topology, stress, strain energy density   3 * nx * ny float32, row-major
//   load_x, load_y, fx, fy, f                 5 float32
//   seed                                      uint64
// Header (28 bytes): "TOPODIF1", u32 version, u32 nx, u32 ny, u64 count.
// Version 1 implies 32-bit float scalars, so the width is not stored.

#include <cstdint>
#include <fstream>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace topoforge::dataset {

inline constexpr char kMagic[8] = {'T', 'O', 'P', 'O', 'D', 'I', 'F', '1'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint32_t kScalarWidth = 4;
inline constexpr std::size_t kHeaderBytes = 28;

struct Sample {
  int nx = 0;
  int ny = 0;
  std::vector<float> topology;
  std::vector<float> stress;
  std::vector<float> strain_energy;
  float load_x = 0, load_y = 0;
  float fx = 0, fy = 0;
  float volume_fraction = 0;
  std::uint64_t seed = 0;

  Sample() = default;
  Sample(int nx_, int ny_);

  std::size_t cells() const { return static_cast<std::size_t>(nx) * ny; }
  // Throws std::invalid_argument naming the first violated invariant: finite
  // values, binary topology, non-negative fields, load inside [0,1]^2 and a
  // unit force (tolerance 1e-6, the resolution of float32 storage).
  void validate() const;
  bool operator==(const Sample&) const = default;
};

std::size_t record_bytes(int nx, int ny);

struct DatasetHeader {
  std::uint32_t version = kVersion;
  std::uint32_t nx = 0, ny = 0;
  std::uint64_t count = 0;
  std::uint32_t scalar_width = kScalarWidth;  // implied by the version
};

class DatasetError : public std::runtime_error {
 public:
  explicit DatasetError(const std::string& what, std::int64_t index = -1)
      : std::runtime_error(index >= 0 ? "record " + std::to_string(index) + ": " + what : what), index_(index) {}
  std::int64_t index() const { return index_; }

 private:
  std::int64_t index_;
};

// Appends records after a placeholder header; close() seeks back and writes
// the final count.
class DatasetWriter {
 public:
  DatasetWriter(const std::string& path, int nx, int ny);
  ~DatasetWriter();
  DatasetWriter(const DatasetWriter&) = delete;
  DatasetWriter& operator=(const DatasetWriter&) = delete;

  void append(const Sample& s);
  void close();
  std::uint64_t count() const { return count_; }

 private:
  void write_header();
  std::ofstream out_;
  std::string path_;
  int nx_, ny_;
  std::uint64_t count_ = 0;
  bool closed_ = false;
};

class DatasetReader {
 public:
  explicit DatasetReader(const std::string& path);

  const DatasetHeader& header() const { return header_; }
  std::uint64_t size() const { return header_.count; }
  // Seeks straight to the record; validates it before returning.
  Sample read(std::uint64_t index);

 private:
  std::ifstream in_;
  std::string path_;
  DatasetHeader header_;
};

std::uint64_t write_samples(const std::string& path, int nx, int ny, const std::vector<Sample>& samples);
Sample read_sample(const std::string& path, std::uint64_t index);

// One block per grid, row r = 0 first, values
// space-separated, followed by the scalar descriptors.
void export_text(const Sample& s, std::ostream& out);
void export_text(const std::string& dataset_path, std::ostream& out);

}  // namespace topoforge::dataset
