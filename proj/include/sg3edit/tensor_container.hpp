#pragma once

// Named-tensor binary container ("SG3T").
//
// Layout (all integers little-endian):
//   magic      4 bytes  "SG3T"
//   version    u32      (currently 1)
//   count      u32      number of entries
//   entries, each:
//     name_len   u32, then name_len bytes of UTF-8
//     dtype      u8     0=f32 1=f64 2=i32 3=i64 4=u8
//     ndim       u32, then ndim x u64 dims
//     byte_len   u64    must equal product(dims) * sizeof(dtype)
//     payload    byte_len bytes, little-endian raw values

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "core.hpp"

namespace sg3 {

static_assert(std::endian::native == std::endian::little, "SG3T I/O assumes a little-endian host");

enum class DType : std::uint8_t { F32 = 0, F64 = 1, I32 = 2, I64 = 3, U8 = 4 };

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::I32: return 4;
    case DType::I64: return 8;
    case DType::U8: return 1;
  }
  throw Error(ErrorCode::Format, "unknown dtype tag");
}

struct TensorEntry {
  std::string name;
  DType dtype = DType::F64;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> bytes;

  std::uint64_t element_count() const {
    return std::accumulate(shape.begin(), shape.end(), std::uint64_t{1}, std::multiplies<>());
  }
};

class TensorContainer {
 public:
  static constexpr char kMagic[4] = {'S', 'G', '3', 'T'};
  static constexpr std::uint32_t kVersion = 1;

  const std::vector<TensorEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  bool contains(std::string_view name) const { return find(name) != nullptr; }

  const TensorEntry& at(std::string_view name) const {
    const TensorEntry* e = find(name);
    require(e != nullptr, ErrorCode::NotFound, "container has no entry '" + std::string(name) + "'");
    return *e;
  }

  void add_raw(TensorEntry entry) {
    require(!contains(entry.name), ErrorCode::InvalidArgument, "duplicate entry name '" + entry.name + "'");
    require(entry.bytes.size() == entry.element_count() * dtype_size(entry.dtype), ErrorCode::Format,
            "byte length does not match shape for '" + entry.name + "'");
    entries_.push_back(std::move(entry));
  }

  template <typename T>
  void add(const std::string& name, std::vector<std::uint64_t> shape, std::span<const T> values) {
    TensorEntry e{name, dtype_of<T>(), std::move(shape), {}};
    require(e.element_count() == values.size(), ErrorCode::DimensionMismatch,
            "shape does not match value count for '" + name + "'");
    e.bytes.resize(values.size_bytes());
    if (!values.empty()) std::memcpy(e.bytes.data(), values.data(), values.size_bytes());
    add_raw(std::move(e));
  }

  void add_f64(const std::string& name, std::vector<std::uint64_t> shape, std::span<const double> values) {
    add<double>(name, std::move(shape), values);
  }

  void add_text(const std::string& name, std::string_view text) {
    add<std::uint8_t>(name, {text.size()},
                      std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

  /// Reads any floating or integer entry as doubles.
  std::vector<double> get_f64(std::string_view name) const {
    const TensorEntry& e = at(name);
    const std::size_t n = e.element_count();
    std::vector<double> out(n);
    switch (e.dtype) {
      case DType::F64: copy_convert<double>(e, out); break;
      case DType::F32: copy_convert<float>(e, out); break;
      case DType::I32: copy_convert<std::int32_t>(e, out); break;
      case DType::I64: copy_convert<std::int64_t>(e, out); break;
      case DType::U8: copy_convert<std::uint8_t>(e, out); break;
    }
    return out;
  }

  template <typename T>
  std::vector<T> get(std::string_view name) const {
    const TensorEntry& e = at(name);
    require(e.dtype == dtype_of<T>(), ErrorCode::Format, "dtype mismatch for '" + std::string(name) + "'");
    std::vector<T> out(e.element_count());
    if (!out.empty()) std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
    return out;
  }

  std::string get_text(std::string_view name) const {
    const TensorEntry& e = at(name);
    return std::string(e.bytes.begin(), e.bytes.end());
  }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out;
    auto put = [&out](const void* p, std::size_t n) {
      const auto* b = static_cast<const std::uint8_t*>(p);
      out.insert(out.end(), b, b + n);
    };
    put(kMagic, 4);
    put(&kVersion, 4);
    const auto count = static_cast<std::uint32_t>(entries_.size());
    put(&count, 4);
    for (const TensorEntry& e : entries_) {
      const auto name_len = static_cast<std::uint32_t>(e.name.size());
      put(&name_len, 4);
      put(e.name.data(), e.name.size());
      const auto tag = static_cast<std::uint8_t>(e.dtype);
      put(&tag, 1);
      const auto ndim = static_cast<std::uint32_t>(e.shape.size());
      put(&ndim, 4);
      for (std::uint64_t d : e.shape) put(&d, 8);
      const std::uint64_t len = e.bytes.size();
      put(&len, 8);
      put(e.bytes.data(), e.bytes.size());
    }
    return out;
  }

  static TensorContainer deserialize(std::span<const std::uint8_t> buf) {
    std::size_t pos = 0;
    auto take = [&](void* dst, std::size_t n) {
      require(pos + n <= buf.size(), ErrorCode::Format, "truncated SG3T data");
      std::memcpy(dst, buf.data() + pos, n);
      pos += n;
    };
    char magic[4];
    take(magic, 4);
    require(std::memcmp(magic, kMagic, 4) == 0, ErrorCode::Format, "bad SG3T magic");
    std::uint32_t version = 0, count = 0;
    take(&version, 4);
    require(version == kVersion, ErrorCode::Format, "unsupported SG3T version " + std::to_string(version));
    take(&count, 4);
    TensorContainer c;
    for (std::uint32_t i = 0; i < count; ++i) {
      TensorEntry e;
      std::uint32_t name_len = 0;
      take(&name_len, 4);
      e.name.resize(name_len);
      take(e.name.data(), name_len);
      std::uint8_t tag = 0;
      take(&tag, 1);
      require(tag <= 4, ErrorCode::Format, "unknown dtype tag " + std::to_string(tag));
      e.dtype = static_cast<DType>(tag);
      std::uint32_t ndim = 0;
      take(&ndim, 4);
      e.shape.resize(ndim);
      for (auto& d : e.shape) take(&d, 8);
      std::uint64_t len = 0;
      take(&len, 8);
      require(len == e.element_count() * dtype_size(e.dtype), ErrorCode::Format,
              "declared byte length mismatch for '" + e.name + "'");
      e.bytes.resize(len);
      take(e.bytes.data(), len);
      c.add_raw(std::move(e));
    }
    require(pos == buf.size(), ErrorCode::Format, "trailing bytes after SG3T entries");
    return c;
  }

  void save(const std::string& path) const {
    const auto bytes = serialize();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), ErrorCode::Io, "cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(f), ErrorCode::Io, "write failed for '" + path + "'");
  }

  static TensorContainer load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(static_cast<bool>(f), ErrorCode::Io, "cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }

 private:
  template <typename T>
  static constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, float>) return DType::F32;
    else if constexpr (std::is_same_v<T, double>) return DType::F64;
    else if constexpr (std::is_same_v<T, std::int32_t>) return DType::I32;
    else if constexpr (std::is_same_v<T, std::int64_t>) return DType::I64;
    else {
      static_assert(std::is_same_v<T, std::uint8_t>, "unsupported tensor element type");
      return DType::U8;
    }
  }

  template <typename T>
  static void copy_convert(const TensorEntry& e, std::vector<double>& out) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      T v;
      std::memcpy(&v, e.bytes.data() + i * sizeof(T), sizeof(T));
      out[i] = static_cast<double>(v);
    }
  }

  const TensorEntry* find(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::vector<TensorEntry> entries_;
};

}  // namespace sg3
