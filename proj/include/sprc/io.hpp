#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unistd.h>

#include "sprc/errors.hpp"

namespace sprc::io {

/// Writes `bytes` to a sibling temp file and renames it over `path`, so
/// readers never observe a partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("write failed: " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename into place: " + path.string());
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Little-endian primitive encoding, independent of host byte order.

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

/// Bounds-checked cursor over a byte buffer; running off the end is a
/// LengthError.
class Reader {
 public:
  explicit Reader(std::string_view buf) : buf_(buf) {}

  std::size_t remaining() const noexcept { return buf_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

  std::string_view take(std::size_t n) {
    if (remaining() < n) throw LengthError("truncated payload at byte " + std::to_string(pos_));
    auto s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }

  std::uint64_t u64() {
    auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string cstring() {
    const auto end = buf_.find('\0', pos_);
    if (end == std::string_view::npos) throw LengthError("unterminated string at byte " + std::to_string(pos_));
    std::string s(buf_.substr(pos_, end - pos_));
    pos_ = end + 1;
    return s;
  }

 private:
  std::string_view buf_;
  std::size_t pos_ = 0;
};

}  // namespace sprc::io
