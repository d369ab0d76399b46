#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "cdmm/error.hpp"

namespace cdmm {

// Little-endian byte sink.
class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }

  const std::vector<char>& buffer() const { return buf_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw FormatError("write failed for '" + path.string() + "'");
  }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::vector<char> buf_;
};

// Little-endian byte source; every read is bounds-checked and failures report the offset.
class ByteReader {
 public:
  explicit ByteReader(std::vector<char> data) : data_(std::move(data)) {}

  static ByteReader open(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(data));
  }

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return data_.size() - pos_; }

  void expect_magic(std::string_view magic) {
    need(magic.size(), "magic");
    if (std::string_view(data_.data() + pos_, magic.size()) != magic) {
      throw FormatError("bad magic, expected '" + std::string(magic) + "'", pos_);
    }
    pos_ += magic.size();
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1, "u8")); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2, "u16")); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4, "u32")); }
  double f64() { return std::bit_cast<double>(get(8, "f64")); }
  std::string string(std::size_t n) {
    need(n, "string");
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::uint64_t n, const char* what) const {
    if (n > remaining()) {
      throw FormatError(std::string("truncated file while reading ") + what, pos_);
    }
  }
  std::uint64_t get(int n, const char* what) {
    need(static_cast<std::uint64_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::uint64_t>(n);
    return v;
  }

  std::vector<char> data_;
  std::uint64_t pos_ = 0;
};

}  // namespace cdmm
