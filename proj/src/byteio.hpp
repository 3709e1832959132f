#pragma once

// Little-endian scalar encoding shared by the binary file formats.

#include <algorithm>
#include <bit>
#include <cstring>
#include <istream>
#include <string>

namespace topoforge::io {

template <typename T>
void put_le(std::string& buf, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  buf.append(bytes, sizeof(T));
}

template <typename T>
T get_le(const char* p) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

// Returns false on a short read.
template <typename T>
bool read_le(std::istream& in, T& value) {
  char bytes[sizeof(T)];
  if (!in.read(bytes, sizeof(T))) return false;
  value = get_le<T>(bytes);
  return true;
}

}  // namespace topoforge::io
