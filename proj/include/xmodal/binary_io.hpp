/*
 * Copyright 2026 The xmodal Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Little-endian binary encoding shared by the dataset, density and checkpoint
// file formats.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "xmodal/error.hpp"

namespace xmodal {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class BinaryWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    const auto* p = reinterpret_cast<const char*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }

  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  // u32 length followed by raw bytes.
  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s);
  }

  const std::vector<char>& bytes() const { return bytes_; }
  std::size_t size() const { return bytes_.size(); }

  void write_file(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
    if (!out) throw IoError("failed writing " + path.string());
  }

 private:
  std::vector<char> bytes_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  static BinaryReader from_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for reading");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return BinaryReader(std::move(bytes));
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    require(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_bytes(std::size_t n) {
    require(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  std::string get_string() { return get_bytes(get<std::uint32_t>()); }

  void expect_magic(std::string_view magic) {
    const std::size_t at = pos_;
    if (remaining() < magic.size() || get_bytes(magic.size()) != magic) {
      throw FormatError("bad magic, expected \"" + std::string(magic) + "\"", at);
    }
  }

  void expect_end() const {
    if (pos_ != bytes_.size()) throw FormatError("trailing bytes after payload", pos_);
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void require(std::size_t n) const {
    if (remaining() < n) throw FormatError("truncated file", pos_);
  }

  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace xmodal
