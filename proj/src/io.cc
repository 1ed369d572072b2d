// Copyright (c) 2026 The cdf-speech Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "cdf/io.h"

#include <bit>
#include <cstring>
#include <fstream>

#include "cdf/common.h"

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts need swaps");

namespace cdf {

void write_u8(std::ostream& os, uint8_t v) {
  os.write(reinterpret_cast<const char*>(&v), 1);
}
void write_u16(std::ostream& os, uint16_t v) {
  os.write(reinterpret_cast<const char*>(&v), 2);
}
void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
void write_i32(std::ostream& os, int32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
void write_f32(std::ostream& os, float v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
void write_f32_array(std::ostream& os, const float* data, size_t n) {
  os.write(reinterpret_cast<const char*>(data),
           static_cast<std::streamsize>(n * 4));
}

namespace {
void read_bytes(std::istream& is, void* out, size_t n) {
  is.read(reinterpret_cast<char*>(out), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw Error("unexpected end of file");
}
}  // namespace

uint8_t read_u8(std::istream& is) {
  uint8_t v;
  read_bytes(is, &v, 1);
  return v;
}
uint16_t read_u16(std::istream& is) {
  uint16_t v;
  read_bytes(is, &v, 2);
  return v;
}
uint32_t read_u32(std::istream& is) {
  uint32_t v;
  read_bytes(is, &v, 4);
  return v;
}
uint64_t read_u64(std::istream& is) {
  uint64_t v;
  read_bytes(is, &v, 8);
  return v;
}
int32_t read_i32(std::istream& is) {
  int32_t v;
  read_bytes(is, &v, 4);
  return v;
}
float read_f32(std::istream& is) {
  float v;
  read_bytes(is, &v, 4);
  return v;
}
void read_f32_array(std::istream& is, float* data, size_t n) {
  read_bytes(is, data, n * 4);
}

void write_magic(std::ostream& os, const char magic[4]) {
  os.write(magic, 4);
}

void expect_magic(std::istream& is, const char magic[4],
                  const std::string& what) {
  char buf[4];
  read_bytes(is, buf, 4);
  if (std::memcmp(buf, magic, 4) != 0)
    throw Error("bad magic in " + what + " file");
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open for writing: " + p.string());
  return os;
}

std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot open for reading: " + p.string());
  return is;
}

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& p) {
  std::ifstream is = open_in(p);
  is.seekg(0, std::ios::end);
  const std::streamoff n = is.tellg();
  is.seekg(0);
  std::vector<uint8_t> out(static_cast<size_t>(n));
  if (n > 0) read_bytes(is, out.data(), out.size());
  return out;
}

bool files_identical(const std::filesystem::path& a,
                     const std::filesystem::path& b) {
  return read_file_bytes(a) == read_file_bytes(b);
}

}  // namespace cdf
