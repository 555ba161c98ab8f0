#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "casam/tensor/parameter.hpp"

namespace casam::tensor {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Little-endian byte sink.
class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v);
  void f32(float v);
  void bytes(const void* data, std::size_t len);
  void floats(std::span<const float> values);
  [[nodiscard]] const std::vector<unsigned char>& buffer() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

/// Little-endian byte source; throws FormatError on truncation.
class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> data) : buf_(std::move(data)) {}
  std::uint32_t u32();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::uint64_t u64();
  float f32();
  std::string string(std::size_t len);
  void floats(std::span<float> out);
  [[nodiscard]] bool exhausted() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const;
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes);

/// Named-array container:
///   "CSAL" | u32 version | i32 task_id | u32 n_blocks | u32 n_arrays |
///   per array: u32 name_len, name, u32 rank, u32 dims[rank], f32 data[numel]
/// All integers and floats little-endian.
struct Checkpoint {
  static constexpr std::array<char, 4> kMagic{'C', 'S', 'A', 'L'};
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::int32_t kIdentityTask = -1;

  struct Array {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };

  std::int32_t task_id = kIdentityTask;
  std::uint32_t n_blocks = 0;
  std::vector<Array> arrays;

  static Checkpoint capture(const ParameterRefs& params, std::int32_t task_id, std::uint32_t n_blocks);
  /// Copies arrays into params by name; shapes must match exactly.
  void restore(const ParameterRefs& params) const;

  [[nodiscard]] std::vector<unsigned char> serialize() const;
  static Checkpoint deserialize(std::vector<unsigned char> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace casam::tensor
