#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "rl4rec/error.hpp"

namespace rl4rec::io {

// Fixed little-endian encoding regardless of host byte order.

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void write_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}
inline void write_f64(std::ostream& os, double v) {
  write_u64(os, std::bit_cast<std::uint64_t>(v));
}
inline void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void read_exact(std::istream& is, void* dst, std::size_t n) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError("unexpected end of binary stream");
}
inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  read_exact(is, b, 8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  read_exact(is, b, 4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline std::uint8_t read_u8(std::istream& is) {
  unsigned char b;
  read_exact(is, &b, 1);
  return b;
}
inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }
inline std::string read_str(std::istream& is, std::size_t max_len = 1 << 20) {
  const std::uint32_t n = read_u32(is);
  if (n > max_len) throw FormatError("string field too long in binary stream");
  std::string s(n, '\0');
  if (n > 0) read_exact(is, s.data(), n);
  return s;
}

/// 64-bit FNV-1a; used for config hashes.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = kDigits[v & 0xF];
  return s;
}

}  // namespace rl4rec::io
