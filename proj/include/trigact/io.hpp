#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "trigact/errors.hpp"
#include "trigact/tensor.hpp"

namespace trigact {

/// Hex SHA-256 of a byte range.
inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

inline std::string sha256_hex(const std::string& s) {
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

/// Element type tags of the container format.
enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kI32 = 2, kU8 = 3, kText = 4 };

/// Named-array container: the on-disk format for checkpoints, dataset
/// caches, perturbation archives and trigger exports.
///
/// Layout (little-endian):
///   "TRIGACT1"  u32 entry_count
///   per entry:  u32 name_len, name bytes, u8 dtype, u32 rank, u64 dims[rank],
///               u64 byte_len, payload
/// Entries are written in name order, so equal contents give equal bytes.
class Container {
 public:
  struct Entry {
    DType dtype = DType::kU8;
    std::vector<std::uint64_t> dims;
    std::vector<std::uint8_t> bytes;
  };

  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  template <typename T>
  void put_tensor(const std::string& name, const Tensor<T>& t) {
    const Shape& s = t.shape();
    put_raw(name, dtype_of<T>(), {s.n, s.c, s.h, s.w}, t.data(), t.size() * sizeof(T));
  }

  template <typename T>
  void put_vector(const std::string& name, const std::vector<T>& v) {
    put_raw(name, dtype_of<T>(), {v.size()}, v.data(), v.size() * sizeof(T));
  }

  void put_text(const std::string& name, const std::string& text) {
    put_raw(name, DType::kText, {text.size()}, text.data(), text.size());
  }

  template <typename T>
  Tensor<T> get_tensor(const std::string& name) const {
    const Entry& e = get(name, dtype_of<T>());
    if (e.dims.size() != 4) throw IngestionError("entry '" + name + "' is not a rank-4 tensor");
    Tensor<T> t(Shape{e.dims[0], e.dims[1], e.dims[2], e.dims[3]});
    if (e.bytes.size() != t.size() * sizeof(T)) throw IngestionError("entry '" + name + "' has wrong size");
    std::memcpy(t.data(), e.bytes.data(), e.bytes.size());
    return t;
  }

  template <typename T>
  std::vector<T> get_vector(const std::string& name) const {
    const Entry& e = get(name, dtype_of<T>());
    std::vector<T> v(e.bytes.size() / sizeof(T));
    std::memcpy(v.data(), e.bytes.data(), v.size() * sizeof(T));
    return v;
  }

  std::string get_text(const std::string& name) const {
    const Entry& e = get(name, DType::kText);
    return std::string(e.bytes.begin(), e.bytes.end());
  }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out;
    append(out, "TRIGACT1", 8);
    write_pod(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
      write_pod(out, static_cast<std::uint32_t>(name.size()));
      append(out, name.data(), name.size());
      write_pod(out, static_cast<std::uint8_t>(e.dtype));
      write_pod(out, static_cast<std::uint32_t>(e.dims.size()));
      for (auto d : e.dims) write_pod(out, d);
      write_pod(out, static_cast<std::uint64_t>(e.bytes.size()));
      append(out, e.bytes.data(), e.bytes.size());
    }
    return out;
  }

  static Container deserialize(std::span<const std::uint8_t> in) {
    std::size_t pos = 0;
    auto take = [&](void* dst, std::size_t n) {
      if (pos + n > in.size()) throw IngestionError("container truncated");
      std::memcpy(dst, in.data() + pos, n);
      pos += n;
    };
    char magic[8];
    take(magic, 8);
    if (std::memcmp(magic, "TRIGACT1", 8) != 0) throw IngestionError("not a trigact container");
    std::uint32_t count = 0;
    take(&count, 4);
    Container c;
    for (std::uint32_t i = 0; i < count; ++i) {
      std::uint32_t len = 0;
      take(&len, 4);
      std::string name(len, '\0');
      take(name.data(), len);
      Entry e;
      std::uint8_t dt = 0;
      take(&dt, 1);
      if (dt > 4) throw IngestionError("unknown dtype in entry '" + name + "'");
      e.dtype = static_cast<DType>(dt);
      std::uint32_t rank = 0;
      take(&rank, 4);
      e.dims.resize(rank);
      for (auto& d : e.dims) take(&d, 8);
      std::uint64_t bytes = 0;
      take(&bytes, 8);
      e.bytes.resize(bytes);
      take(e.bytes.data(), bytes);
      c.entries_.emplace(std::move(name), std::move(e));
    }
    return c;
  }

  /// Write atomically (temp file + rename).
  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto bytes = serialize();
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("cannot write " + tmp);
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      if (!out) throw Error("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

  static Container load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }

  std::string content_hash() const {
    const auto bytes = serialize();
    return sha256_hex(bytes);
  }

 private:
  template <typename T>
  static constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, float>) return DType::kF32;
    else if constexpr (std::is_same_v<T, double>) return DType::kF64;
    else if constexpr (std::is_same_v<T, std::int32_t>) return DType::kI32;
    else if constexpr (std::is_same_v<T, std::uint8_t>) return DType::kU8;
    else static_assert(sizeof(T) == 0, "unsupported container element type");
  }

  void put_raw(const std::string& name, DType dt, std::vector<std::uint64_t> dims, const void* data,
               std::size_t bytes) {
    Entry e{dt, std::move(dims), std::vector<std::uint8_t>(bytes)};
    if (bytes) std::memcpy(e.bytes.data(), data, bytes);
    entries_[name] = std::move(e);
  }

  const Entry& get(const std::string& name, DType dt) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IngestionError("container has no entry '" + name + "'");
    if (it->second.dtype != dt) throw IngestionError("entry '" + name + "' has unexpected dtype");
    return it->second;
  }

  static void append(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename P>
  static void write_pod(std::vector<std::uint8_t>& out, P v) {
    append(out, &v, sizeof(P));
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace trigact
