#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "dnas/errors.hpp"

namespace dnas::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <class T>
T get(std::istream& is, const char* what) {
  T v{};
  char buf[sizeof(T)];
  if (!is.read(buf, sizeof(T))) throw IoError(std::string("truncated file while reading ") + what);
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline void put_bytes(std::ostream& os, const void* data, std::size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::istream& is, void* data, std::size_t n, const char* what) {
  if (n && !is.read(static_cast<char*>(data), static_cast<std::streamsize>(n)))
    throw IoError(std::string("truncated file while reading ") + what);
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  put_bytes(os, s.data(), s.size());
}

inline std::string get_string(std::istream& is, const char* what, std::uint64_t limit = 1ull << 32) {
  const auto n = get<std::uint64_t>(is, what);
  if (n > limit) throw IoError(std::string("implausible length while reading ") + what);
  std::string s(n, '\0');
  get_bytes(is, s.data(), n, what);
  return s;
}

}  // namespace dnas::io
