// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

// Little-endian readers and writers for the binary container formats.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "upoc2/errors.hpp"

namespace upoc2::detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u16(std::uint16_t v) { put_le(v); }
  void u32(std::uint32_t v) { put_le(v); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  const std::string& str() const { return buf_; }

 private:
  template <typename U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string what) : data_(data), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  std::string bytes(std::size_t n) {
    need(n);
    std::string out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint16_t u16() { return get_le<std::uint16_t>(); }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(what_ + ": " + msg + " at byte offset " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      fail("truncated payload (need " + std::to_string(n) + " bytes, " + std::to_string(data_.size() - pos_) +
           " left)");
    }
  }
  template <typename U>
  U get_le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  const std::string& data_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

}  // namespace upoc2::detail
