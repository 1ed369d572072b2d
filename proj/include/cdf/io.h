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

#ifndef CDF_IO_H_
#define CDF_IO_H_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace cdf {

// Little-endian binary primitives shared by all file formats.
void write_u8(std::ostream& os, uint8_t v);
void write_u16(std::ostream& os, uint16_t v);
void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_i32(std::ostream& os, int32_t v);
void write_f32(std::ostream& os, float v);
void write_f32_array(std::ostream& os, const float* data, size_t n);

uint8_t read_u8(std::istream& is);
uint16_t read_u16(std::istream& is);
uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);
int32_t read_i32(std::istream& is);
float read_f32(std::istream& is);
void read_f32_array(std::istream& is, float* data, size_t n);

void write_magic(std::ostream& os, const char magic[4]);
void expect_magic(std::istream& is, const char magic[4],
                  const std::string& what);

std::ofstream open_out(const std::filesystem::path& p);
std::ifstream open_in(const std::filesystem::path& p);

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& p);
bool files_identical(const std::filesystem::path& a,
                     const std::filesystem::path& b);

}  // namespace cdf

#endif  // CDF_IO_H_
