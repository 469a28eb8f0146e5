#include "debias/tensor_io.hpp"

#include <bit>
#include <cstring>

namespace debias {

static_assert(sizeof(float) == 4, "float must be 32-bit");

ByteWriter::ByteWriter(const std::string& path)
    : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
  if (!out_) throw std::runtime_error("cannot open for writing: " + path);
}

void ByteWriter::u8(std::uint8_t v) {
  out_.put(static_cast<char>(v));
  offset_ += 1;
}

void ByteWriter::u32(std::uint32_t v) {
  char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out_.write(buf, 4);
  offset_ += 4;
}

void ByteWriter::u64(std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out_.write(buf, 8);
  offset_ += 8;
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::bytes(std::span<const char> data) {
  out_.write(data.data(), static_cast<std::streamsize>(data.size()));
  offset_ += data.size();
}

void ByteWriter::f32_array(std::span<const float> data) {
  if constexpr (std::endian::native == std::endian::little) {
    bytes({reinterpret_cast<const char*>(data.data()), data.size() * 4});
  } else {
    for (float v : data) f32(v);
  }
}

void ByteWriter::u32_array(std::span<const std::uint32_t> data) {
  if constexpr (std::endian::native == std::endian::little) {
    bytes({reinterpret_cast<const char*>(data.data()), data.size() * 4});
  } else {
    for (std::uint32_t v : data) u32(v);
  }
}

void ByteWriter::close() {
  out_.close();
  if (!out_) throw std::runtime_error("write failed: " + path_);
}

ByteReader::ByteReader(const std::string& path) : in_(path, std::ios::binary) {
  if (!in_) throw std::runtime_error("cannot open for reading: " + path);
}

void ByteReader::bytes(std::span<char> data) {
  in_.read(data.data(), static_cast<std::streamsize>(data.size()));
  if (static_cast<std::size_t>(in_.gcount()) != data.size())
    throw FormatError("truncated file", offset_);
  offset_ += data.size();
}

std::uint8_t ByteReader::u8() {
  char b;
  bytes({&b, 1});
  return static_cast<std::uint8_t>(b);
}

std::uint32_t ByteReader::u32() {
  char buf[4];
  bytes(buf);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  char buf[8];
  bytes(buf);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

void ByteReader::f32_array(std::span<float> data) {
  if constexpr (std::endian::native == std::endian::little) {
    bytes({reinterpret_cast<char*>(data.data()), data.size() * 4});
  } else {
    for (float& v : data) v = f32();
  }
}

void ByteReader::u32_array(std::span<std::uint32_t> data) {
  if constexpr (std::endian::native == std::endian::little) {
    bytes({reinterpret_cast<char*>(data.data()), data.size() * 4});
  } else {
    for (std::uint32_t& v : data) v = u32();
  }
}

void ByteReader::expect_magic(const char expected[4]) {
  const std::uint64_t at = offset_;
  char got[4];
  bytes(got);
  if (std::memcmp(got, expected, 4) != 0)
    throw FormatError(std::string("bad magic, expected \"") +
                          std::string(expected, 4) + "\" got \"" +
                          std::string(got, 4) + "\"",
                      at);
}

bool ByteReader::at_eof() {
  return in_.peek() == std::ifstream::traits_type::eof();
}

void write_tensor_file(const TensorFile& file, const std::string& path) {
  if (file.data.rows != file.labels.size() || file.data.rows != file.flags.size())
    throw std::invalid_argument("tensor file: rows, labels and flags must agree");
  ByteWriter w(path);
  w.bytes({file.magic.data(), 4});
  w.u32(file.version);
  w.u64(file.data.rows);
  w.u64(file.data.cols);
  w.u32(file.num_classes);
  w.f32_array(file.data.data);
  w.u32_array(file.labels);
  w.bytes({reinterpret_cast<const char*>(file.flags.data()), file.flags.size()});
  w.u64(file.meta_json.size());
  w.bytes({file.meta_json.data(), file.meta_json.size()});
  w.close();
}

TensorFile read_tensor_file(const std::string& path, const char expected_magic[4]) {
  ByteReader r(path);
  TensorFile file;
  r.expect_magic(expected_magic);
  std::memcpy(file.magic.data(), expected_magic, 4);
  const std::uint64_t version_at = r.offset();
  file.version = r.u32();
  if (file.version != kFormatVersion)
    throw FormatError("unsupported version " + std::to_string(file.version), version_at);
  const std::uint64_t n = r.u64();
  const std::uint64_t d = r.u64();
  file.num_classes = r.u32();
  file.data = Matrix(n, d);
  r.f32_array(file.data.data);
  file.labels.resize(n);
  r.u32_array(file.labels);
  file.flags.resize(n);
  r.bytes({reinterpret_cast<char*>(file.flags.data()), file.flags.size()});
  const std::uint64_t meta_len = r.u64();
  file.meta_json.resize(meta_len);
  r.bytes({file.meta_json.data(), file.meta_json.size()});
  if (!r.at_eof())
    throw FormatError("trailing bytes after payload", r.offset());
  return file;
}

}  // namespace debias
