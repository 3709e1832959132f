#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <cstring>

#include "topoforge/dataset.hpp"

using namespace topoforge::dataset;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "topoforge_tests";
  fs::create_directories(dir);
  return (dir / name).string();
}

Sample random_sample(int nx, int ny, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::exponential_distribution<float> heavy(0.1f);
  Sample s(nx, ny);
  for (std::size_t e = 0; e < s.cells(); ++e) {
    s.topology[e] = u(rng) > 0.5f ? 1.0f : 0.0f;
    s.stress[e] = heavy(rng);
    s.strain_energy[e] = heavy(rng) * 1e-3f;
  }
  const double theta = u(rng) * 2 * M_PI;
  s.load_x = u(rng);
  s.load_y = u(rng);
  s.fx = static_cast<float>(std::cos(theta));
  s.fy = static_cast<float>(std::sin(theta));
  s.volume_fraction = 0.3f + 0.2f * u(rng);
  s.seed = rng();
  return s;
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST(DatasetFormat, EmptyFileIsHeaderOnly) {
  const auto path = temp_path("empty.tfd");
  EXPECT_EQ(write_samples(path, 64, 64, {}), 0u);
  EXPECT_EQ(fs::file_size(path), 28u);
  DatasetReader r(path);
  EXPECT_EQ(r.size(), 0u);
  EXPECT_EQ(r.header().nx, 64u);
  EXPECT_EQ(r.header().scalar_width, 4u);
}

TEST(DatasetFormat, OneFullSizeRecord) {
  std::mt19937_64 rng(1);
  const auto path = temp_path("one.tfd");
  write_samples(path, 64, 64, {random_sample(64, 64, rng)});
  EXPECT_EQ(record_bytes(64, 64), 49180u);
  EXPECT_EQ(fs::file_size(path), 28u + 49180u);
}

TEST(DatasetFormat, HeaderBytesAreLittleEndian) {
  const auto path = temp_path("hdr.tfd");
  std::mt19937_64 rng(2);
  write_samples(path, 3, 2, {random_sample(3, 2, rng), random_sample(3, 2, rng)});
  std::ifstream in(path, std::ios::binary);
  unsigned char h[28];
  in.read(reinterpret_cast<char*>(h), 28);
  EXPECT_EQ(std::string(reinterpret_cast<char*>(h), 8), "TOPODIF1");
  const unsigned char expect_tail[20] = {1, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0};
  for (int i = 0; i < 20; ++i) EXPECT_EQ(h[8 + i], expect_tail[i]) << "byte " << 8 + i;
}

TEST(DatasetFormat, RoundTripIsBitwise) {
  std::mt19937_64 rng(3);
  std::vector<Sample> samples;
  for (int i = 0; i < 50; ++i) samples.push_back(random_sample(16, 16, rng));
  const auto path = temp_path("roundtrip.tfd");
  EXPECT_EQ(write_samples(path, 16, 16, samples), 50u);
  DatasetReader r(path);
  ASSERT_EQ(r.size(), 50u);
  for (std::uint64_t i : {49u, 0u, 17u, 3u}) {
    const auto s = r.read(i);
    EXPECT_TRUE(bitwise_equal(s.topology, samples[i].topology));
    EXPECT_TRUE(bitwise_equal(s.stress, samples[i].stress));
    EXPECT_TRUE(bitwise_equal(s.strain_energy, samples[i].strain_energy));
    EXPECT_EQ(s, samples[i]);
  }
  EXPECT_EQ(read_sample(path, 7), samples[7]);
}

TEST(DatasetFormat, IndexOutOfRange) {
  std::mt19937_64 rng(4);
  const auto path = temp_path("range.tfd");
  write_samples(path, 4, 4, {random_sample(4, 4, rng)});
  DatasetReader r(path);
  try {
    r.read(1);
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_EQ(e.index(), 1);
    EXPECT_NE(std::string(e.what()).find("out of range"), std::string::npos);
  }
}

TEST(DatasetFormat, TruncatedFileIsReported) {
  std::mt19937_64 rng(5);
  const auto path = temp_path("trunc.tfd");
  write_samples(path, 8, 8, {random_sample(8, 8, rng), random_sample(8, 8, rng)});
  fs::resize_file(path, fs::file_size(path) - 10);
  EXPECT_THROW(DatasetReader{path}, DatasetError);
  fs::resize_file(path, 20);
  EXPECT_THROW(DatasetReader{path}, DatasetError);
}

TEST(DatasetFormat, BadMagicAndVersion) {
  const auto path = temp_path("magic.tfd");
  write_samples(path, 4, 4, {});
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.write("TOPODIF2", 8);
  }
  EXPECT_THROW(DatasetReader{path}, DatasetError);
  write_samples(path, 4, 4, {});
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(8);
    const char v[4] = {9, 0, 0, 0};
    f.write(v, 4);
  }
  EXPECT_THROW(DatasetReader{path}, DatasetError);
}

TEST(DatasetFormat, CorruptPayloadRejectedWithIndex) {
  std::mt19937_64 rng(6);
  const auto path = temp_path("nan.tfd");
  write_samples(path, 4, 4, {random_sample(4, 4, rng), random_sample(4, 4, rng), random_sample(4, 4, rng)});
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(static_cast<std::streamoff>(28 + 2 * record_bytes(4, 4) + 16 * 4 + 8));
    const float nan = std::numeric_limits<float>::quiet_NaN();
    f.write(reinterpret_cast<const char*>(&nan), 4);
  }
  DatasetReader r(path);
  EXPECT_NO_THROW(r.read(0));
  EXPECT_NO_THROW(r.read(1));
  try {
    r.read(2);
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_EQ(e.index(), 2);
  }
}

TEST(DatasetFormat, WriterRejectsInvalidSamples) {
  std::mt19937_64 rng(7);
  const auto path = temp_path("invalid.tfd");
  DatasetWriter w(path, 4, 4);
  auto s = random_sample(4, 4, rng);
  s.topology[0] = 0.5f;
  EXPECT_THROW(w.append(s), DatasetError);
  s = random_sample(4, 4, rng);
  s.fx = 2.0f;
  EXPECT_THROW(w.append(s), DatasetError);
  EXPECT_THROW(w.append(random_sample(5, 4, rng)), DatasetError);
  w.append(random_sample(4, 4, rng));
  w.close();
  EXPECT_EQ(DatasetReader(path).size(), 1u);
}

TEST(DatasetFormat, TextExport) {
  Sample s(2, 2);
  s.topology = {1, 0, 0, 1};
  s.stress = {0.5f, 1, 2, 3};
  s.strain_energy = {0, 0, 0, 0.25f};
  s.load_x = 1;
  s.load_y = 0.5f;
  s.fx = 0;
  s.fy = -1;
  s.volume_fraction = 0.5f;
  s.seed = 9;
  std::ostringstream out;
  export_text(s, out);
  EXPECT_EQ(out.str(),
            "# topology 2 2\n1 0\n0 1\n# stress 2 2\n0.5 1\n2 3\n# strain_energy 2 2\n0 0\n0 0.25\n"
            "# descriptors load_x load_y fx fy f seed\n1 0.5 0 -1 0.5 9\n\n");
}
