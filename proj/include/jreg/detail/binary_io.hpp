#pragma once

// Little-endian encoding helpers shared by the binary file formats.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "jreg/errors.hpp"

namespace jreg::detail {

class ByteWriter {
 public:
  void bytes(std::string_view raw) { buf_.insert(buf_.end(), raw.begin(), raw.end()); }

  template <class T>
  void scalar(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    buf_.insert(buf_.end(), raw, raw + sizeof(T));
  }

  void u32(std::uint32_t v) { scalar(v); }
  void u64(std::uint64_t v) { scalar(v); }
  void f64(double v) { scalar(v); }
  void f32(float v) { scalar(v); }

  void f64s(std::span<const double> values) {
    if constexpr (std::endian::native == std::endian::little) {
      const auto* p = reinterpret_cast<const char*>(values.data());
      buf_.insert(buf_.end(), p, p + values.size_bytes());
    } else {
      for (double v : values) f64(v);
    }
  }

  void string(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }

  const std::vector<char>& buffer() const { return buf_; }

  void write_file(const std::filesystem::path& path) const;

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> buf) : buf_(std::move(buf)) {}

  static ByteReader from_file(const std::filesystem::path& path);

  std::uint64_t offset() const { return pos_; }
  std::uint64_t size() const { return buf_.size(); }
  std::uint64_t remaining() const { return buf_.size() - pos_; }

  void expect_magic(std::string_view magic, std::string_view what) {
    need(magic.size(), what);
    if (std::string_view(buf_.data() + pos_, magic.size()) != magic) {
      throw FormatError("bad magic for " + std::string(what) + ", expected \"" + std::string(magic) + "\"", pos_);
    }
    pos_ += magic.size();
  }

  template <class T>
  T scalar(std::string_view what) {
    need(sizeof(T), what);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }

  std::uint32_t u32(std::string_view what) { return scalar<std::uint32_t>(what); }
  std::uint64_t u64(std::string_view what) { return scalar<std::uint64_t>(what); }
  double f64(std::string_view what) { return scalar<double>(what); }
  float f32(std::string_view what) { return scalar<float>(what); }

  void f64s(std::span<double> out, std::string_view what) {
    need(out.size_bytes(), what);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), buf_.data() + pos_, out.size_bytes());
      pos_ += out.size_bytes();
    } else {
      for (auto& v : out) v = f64(what);
    }
  }

  std::string string(std::string_view what) {
    const auto n = u32(what);
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  void expect_end(std::string_view what) const {
    if (pos_ != buf_.size()) {
      throw FormatError(std::to_string(buf_.size() - pos_) + " trailing bytes after " + std::string(what), pos_);
    }
  }

  void need(std::uint64_t n, std::string_view what) const {
    if (n > remaining()) {
      throw FormatError("truncated input while reading " + std::string(what) + ": need " + std::to_string(n) +
                            " bytes, " + std::to_string(remaining()) + " available",
                        pos_);
    }
  }

 private:
  std::vector<char> buf_;
  std::uint64_t pos_ = 0;
};

}  // namespace jreg::detail
