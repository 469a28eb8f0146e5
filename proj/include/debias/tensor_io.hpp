#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "debias/matrix.hpp"

namespace debias {

// Malformed or truncated file. Carries the byte offset of the failure.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// Little-endian binary writer over a file stream.
class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path);
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void bytes(std::span<const char> data);
  void f32_array(std::span<const float> data);
  void u32_array(std::span<const std::uint32_t> data);
  void close();
  std::uint64_t offset() const { return offset_; }

 private:
  std::ofstream out_;
  std::string path_;
  std::uint64_t offset_ = 0;
};

// Little-endian binary reader; every read throws FormatError with the
// current byte offset on truncation.
class ByteReader {
 public:
  explicit ByteReader(const std::string& path);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  void bytes(std::span<char> data);
  void f32_array(std::span<float> data);
  void u32_array(std::span<std::uint32_t> data);
  void expect_magic(const char expected[4]);
  bool at_eof();
  std::uint64_t offset() const { return offset_; }

 private:
  std::ifstream in_;
  std::uint64_t offset_ = 0;
};

// Shared container for the "DBDS" dataset and "DBFT" feature-export files:
// a float32 matrix with per-row labels and alignment flags plus a JSON
// metadata blob.
//
// Layout: magic[4] | version u32 | n u64 | d u64 | num_classes u32 |
//         data f32[n*d] | labels u32[n] | flags u8[n] |
//         meta_len u64 | meta_json bytes. All integers little-endian.
struct TensorFile {
  std::array<char, 4> magic{};
  std::uint32_t version = 1;
  std::uint32_t num_classes = 0;
  Matrix data;
  std::vector<std::uint32_t> labels;
  std::vector<std::uint8_t> flags;
  std::string meta_json;
};

inline constexpr char kDatasetMagic[4] = {'D', 'B', 'D', 'S'};
inline constexpr char kFeatureMagic[4] = {'D', 'B', 'F', 'T'};
inline constexpr char kModelMagic[4] = {'D', 'B', 'M', 'W'};
inline constexpr std::uint32_t kFormatVersion = 1;

void write_tensor_file(const TensorFile& file, const std::string& path);
TensorFile read_tensor_file(const std::string& path, const char expected_magic[4]);

}  // namespace debias
