#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "refinery/tensor.hpp"

namespace refinery {

// RNTB tensor blob:
//   "RNTB" | u32 version = 1 | u8 dtype | u32 ndim | ndim x u32 dims | payload
// All integers and the payload are little-endian.
enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kU8 = 2 };

std::size_t dtype_size(DType t);

struct Blob {
  DType dtype = DType::kF64;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;  // little-endian element bytes

  std::size_t element_count() const;
  bool operator==(const Blob&) const = default;

  static Blob from_tensor(const Tensor& t, DType dtype = DType::kF64);
  static Blob from_bytes(std::span<const std::uint8_t> bytes);
  static Blob from_text(const std::string& text);
  static Blob from_u64(std::span<const std::uint64_t> values);

  // Rank-4 blobs map to NCHW directly; lower ranks are padded on the left.
  Tensor to_tensor() const;
  std::string to_text() const;
  std::vector<std::uint64_t> to_u64() const;
};

std::vector<std::uint8_t> encode_blob(const Blob& blob);
// Parses one blob starting at bytes[pos]; advances pos past it.
Blob decode_blob(std::span<const std::uint8_t> bytes, std::size_t& pos);

// Named collection of blobs. File layout:
//   u32 entry count
//   per entry: u32 name length | name bytes | u64 absolute blob offset
//   concatenated RNTB blobs
class BlobArchive {
 public:
  void put(std::string name, Blob blob);
  bool contains(const std::string& name) const;
  const Blob& get(const std::string& name) const;  // throws IoError when missing
  const std::vector<std::pair<std::string, Blob>>& entries() const { return entries_; }

  std::vector<std::uint8_t> serialize() const;
  static BlobArchive deserialize(std::span<const std::uint8_t> bytes);

  // Writes via a temporary file and rename, so an existing file is only
  // replaced by a complete archive.
  void save(const std::string& path) const;
  static BlobArchive load(const std::string& path);

 private:
  std::vector<std::pair<std::string, Blob>> entries_;
};

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace refinery
