#include "refinery/blob.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "refinery/error.hpp"

namespace refinery {
namespace {

constexpr char kMagic[4] = {'R', 'N', 'T', 'B'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

template <typename T>
T get_le(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw IoError("truncated blob data");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<T>(in[pos + i]) << (8 * i));
  }
  pos += sizeof(T);
  return v;
}

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
  }
  throw IoError("unknown dtype " + std::to_string(static_cast<int>(t)));
}

std::size_t Blob::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

Blob Blob::from_tensor(const Tensor& t, DType dtype) {
  Blob b;
  b.dtype = dtype;
  const Shape s = t.shape();
  b.dims = {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
            static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
  auto d = t.data();
  b.payload.reserve(d.size() * dtype_size(dtype));
  for (double v : d) {
    switch (dtype) {
      case DType::kF64: put_le(b.payload, std::bit_cast<std::uint64_t>(v)); break;
      case DType::kF32:
        put_le(b.payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        break;
      case DType::kU8: {
        const double c = v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v);
        b.payload.push_back(static_cast<std::uint8_t>(c + 0.5));
        break;
      }
    }
  }
  return b;
}

Blob Blob::from_bytes(std::span<const std::uint8_t> bytes) {
  Blob b;
  b.dtype = DType::kU8;
  b.dims = {static_cast<std::uint32_t>(bytes.size())};
  b.payload.assign(bytes.begin(), bytes.end());
  return b;
}

Blob Blob::from_text(const std::string& text) {
  return from_bytes(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Blob Blob::from_u64(std::span<const std::uint64_t> values) {
  std::vector<std::uint8_t> bytes;
  for (auto v : values) put_le(bytes, v);
  return from_bytes(bytes);
}

Tensor Blob::to_tensor() const {
  if (dims.size() > 4) throw IoError("blob rank " + std::to_string(dims.size()) + " > 4");
  int ext[4] = {1, 1, 1, 1};
  for (std::size_t i = 0; i < dims.size(); ++i) {
    ext[4 - dims.size() + i] = static_cast<int>(dims[i]);
  }
  Tensor t(Shape{ext[0], ext[1], ext[2], ext[3]});
  auto d = t.data();
  std::size_t pos = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    switch (dtype) {
      case DType::kF64: d[i] = std::bit_cast<double>(get_le<std::uint64_t>(payload, pos)); break;
      case DType::kF32: d[i] = std::bit_cast<float>(get_le<std::uint32_t>(payload, pos)); break;
      case DType::kU8: d[i] = payload.at(pos++); break;
    }
  }
  return t;
}

std::string Blob::to_text() const {
  if (dtype != DType::kU8) throw IoError("text blob must be u8");
  return std::string(payload.begin(), payload.end());
}

std::vector<std::uint64_t> Blob::to_u64() const {
  if (dtype != DType::kU8 || payload.size() % 8 != 0) {
    throw IoError("u64 blob must be u8 bytes in multiples of 8");
  }
  std::vector<std::uint64_t> out;
  std::size_t pos = 0;
  while (pos < payload.size()) out.push_back(get_le<std::uint64_t>(payload, pos));
  return out;
}

std::vector<std::uint8_t> encode_blob(const Blob& blob) {
  if (blob.payload.size() != blob.element_count() * dtype_size(blob.dtype)) {
    throw IoError("blob payload size does not match dims");
  }
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le(out, kVersion);
  out.push_back(static_cast<std::uint8_t>(blob.dtype));
  put_le(out, static_cast<std::uint32_t>(blob.dims.size()));
  for (auto d : blob.dims) put_le(out, d);
  out.insert(out.end(), blob.payload.begin(), blob.payload.end());
  return out;
}

Blob decode_blob(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + 4 > bytes.size() || std::memcmp(bytes.data() + pos, kMagic, 4) != 0) {
    throw IoError("bad RNTB magic at offset " + std::to_string(pos));
  }
  pos += 4;
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kVersion) {
    throw IoError("unsupported RNTB version " + std::to_string(version));
  }
  if (pos >= bytes.size()) throw IoError("truncated blob header");
  Blob b;
  const std::uint8_t dt = bytes[pos++];
  if (dt > 2) throw IoError("unknown RNTB dtype " + std::to_string(dt));
  b.dtype = static_cast<DType>(dt);
  const auto ndim = get_le<std::uint32_t>(bytes, pos);
  if (ndim > 8) throw IoError("implausible RNTB rank " + std::to_string(ndim));
  for (std::uint32_t i = 0; i < ndim; ++i) b.dims.push_back(get_le<std::uint32_t>(bytes, pos));
  const std::size_t len = b.element_count() * dtype_size(b.dtype);
  if (pos + len > bytes.size()) throw IoError("truncated RNTB payload");
  b.payload.assign(bytes.begin() + pos, bytes.begin() + pos + len);
  pos += len;
  return b;
}

void BlobArchive::put(std::string name, Blob blob) {
  for (auto& [n, b] : entries_) {
    if (n == name) {
      b = std::move(blob);
      return;
    }
  }
  entries_.emplace_back(std::move(name), std::move(blob));
}

bool BlobArchive::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return true;
  }
  return false;
}

const Blob& BlobArchive::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return e.second;
  }
  throw IoError("archive has no entry '" + name + "'");
}

std::vector<std::uint8_t> BlobArchive::serialize() const {
  std::size_t header = 4;
  for (const auto& e : entries_) header += 4 + e.first.size() + 8;
  std::vector<std::vector<std::uint8_t>> blobs;
  blobs.reserve(entries_.size());
  for (const auto& e : entries_) blobs.push_back(encode_blob(e.second));

  std::vector<std::uint8_t> out;
  put_le(out, static_cast<std::uint32_t>(entries_.size()));
  std::uint64_t offset = header;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    put_le(out, static_cast<std::uint32_t>(entries_[i].first.size()));
    out.insert(out.end(), entries_[i].first.begin(), entries_[i].first.end());
    put_le(out, offset);
    offset += blobs[i].size();
  }
  for (const auto& b : blobs) out.insert(out.end(), b.begin(), b.end());
  return out;
}

BlobArchive BlobArchive::deserialize(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  const auto count = get_le<std::uint32_t>(bytes, pos);
  std::vector<std::pair<std::string, std::uint64_t>> index;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw IoError("truncated archive index");
    std::string name(bytes.begin() + pos, bytes.begin() + pos + len);
    pos += len;
    index.emplace_back(std::move(name), get_le<std::uint64_t>(bytes, pos));
  }
  BlobArchive archive;
  for (auto& [name, offset] : index) {
    std::size_t p = offset;
    archive.entries_.emplace_back(std::move(name), decode_blob(bytes, p));
  }
  return archive;
}

void BlobArchive::save(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  write_file_bytes(tmp, serialize());
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " to " + path + ": " + ec.message());
}

BlobArchive BlobArchive::load(const std::string& path) {
  return deserialize(read_file_bytes(path));
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace refinery
