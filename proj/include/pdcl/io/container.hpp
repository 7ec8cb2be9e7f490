#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdcl/core/error.hpp"
#include "pdcl/core/hash.hpp"
#include "pdcl/core/tensor.hpp"

namespace pdcl::io {

// Named-array container. Little-endian layout:
//   "PDCLARR\0"  u32 version  u64 meta_len  meta (JSON, UTF-8)
//   u32 count, then per array: u32 name_len name u8 dtype u32 rank u64 dims[rank] data
//   u64 FNV-1a of every preceding byte
inline constexpr char kContainerMagic[8] = {'P', 'D', 'C', 'L', 'A', 'R', 'R', '\0'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

struct StoredArray {
  DType dtype = DType::F32;
  Shape shape;
  std::vector<std::uint8_t> bytes;
};

class Container {
 public:
  nlohmann::json meta = nlohmann::json::object();

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    StoredArray a{dtype_of<T>(), t.shape(), std::vector<std::uint8_t>(t.numel() * sizeof(T))};
    if (!a.bytes.empty()) std::memcpy(a.bytes.data(), t.data(), a.bytes.size());
    arrays_[name] = std::move(a);
  }

  bool contains(const std::string& name) const { return arrays_.count(name) > 0; }
  const std::map<std::string, StoredArray>& arrays() const { return arrays_; }

  // Same dtype: exact bytes. Otherwise converted element by element.
  template <typename T>
  Tensor<T> get(const std::string& name) const {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw LookupError("container has no array '" + name + "'");
    const StoredArray& a = it->second;
    Tensor<T> t(a.shape);
    if (a.dtype == dtype_of<T>()) {
      if (!a.bytes.empty()) std::memcpy(t.data(), a.bytes.data(), a.bytes.size());
    } else if (a.dtype == DType::F32) {
      for (std::size_t i = 0; i < t.numel(); ++i) {
        float v;
        std::memcpy(&v, a.bytes.data() + 4 * i, 4);
        t[i] = static_cast<T>(v);
      }
    } else {
      for (std::size_t i = 0; i < t.numel(); ++i) {
        double v;
        std::memcpy(&v, a.bytes.data() + 8 * i, 8);
        t[i] = static_cast<T>(v);
      }
    }
    return t;
  }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out(kContainerMagic, kContainerMagic + 8);
    auto put_raw = [&out](const void* p, std::size_t n) {
      const auto* b = static_cast<const std::uint8_t*>(p);
      out.insert(out.end(), b, b + n);
    };
    put_raw(&kContainerVersion, 4);
    const std::string m = meta.dump();
    const std::uint64_t mlen = m.size();
    put_raw(&mlen, 8);
    put_raw(m.data(), m.size());
    const std::uint32_t count = static_cast<std::uint32_t>(arrays_.size());
    put_raw(&count, 4);
    for (const auto& [name, a] : arrays_) {
      const std::uint32_t nlen = static_cast<std::uint32_t>(name.size());
      put_raw(&nlen, 4);
      put_raw(name.data(), name.size());
      out.push_back(static_cast<std::uint8_t>(a.dtype));
      const std::uint32_t rank = static_cast<std::uint32_t>(a.shape.size());
      put_raw(&rank, 4);
      for (std::size_t d : a.shape) {
        const std::uint64_t d64 = d;
        put_raw(&d64, 8);
      }
      put_raw(a.bytes.data(), a.bytes.size());
    }
    Fnv1a h;
    h.update(out.data(), out.size());
    const std::uint64_t sum = h.digest();
    put_raw(&sum, 8);
    return out;
  }

  // Validates the whole byte string before anything is returned.
  static Container deserialize(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    auto fail = [&origin](const std::string& why) -> IoError {
      return IoError(origin + ": " + why);
    };
    if (bytes.size() < 8 + 4 + 8 + 4 + 8) throw fail("file too short for a container");
    if (std::memcmp(bytes.data(), kContainerMagic, 8) != 0) throw fail("bad magic");
    std::uint32_t version;
    std::memcpy(&version, bytes.data() + 8, 4);
    if (version != kContainerVersion) {
      throw fail("container version " + std::to_string(version) + " is not supported (expected " +
                 std::to_string(kContainerVersion) + ")");
    }
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body, 8);
    Fnv1a h;
    h.update(bytes.data(), body);
    if (h.digest() != stored) throw fail("checksum mismatch (file corrupted)");

    std::size_t pos = 12;
    auto take = [&](void* dst, std::size_t n) {
      if (n > body - pos) throw fail("truncated record");
      std::memcpy(dst, bytes.data() + pos, n);
      pos += n;
    };
    Container c;
    std::uint64_t mlen;
    take(&mlen, 8);
    if (mlen > body - pos) throw fail("truncated metadata");
    try {
      c.meta = nlohmann::json::parse(bytes.begin() + long(pos), bytes.begin() + long(pos + mlen));
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("metadata is not valid JSON: ") + e.what());
    }
    pos += mlen;
    std::uint32_t count;
    take(&count, 4);
    for (std::uint32_t i = 0; i < count; ++i) {
      std::uint32_t nlen;
      take(&nlen, 4);
      if (nlen > body - pos) throw fail("truncated array name");
      std::string name(reinterpret_cast<const char*>(bytes.data() + pos), nlen);
      pos += nlen;
      StoredArray a;
      std::uint8_t dt;
      take(&dt, 1);
      if (dt > 1) throw fail("unknown dtype code " + std::to_string(dt));
      a.dtype = static_cast<DType>(dt);
      std::uint32_t rank;
      take(&rank, 4);
      std::size_t n = 1;
      for (std::uint32_t r = 0; r < rank; ++r) {
        std::uint64_t d;
        take(&d, 8);
        a.shape.push_back(d);
        n *= d;
      }
      const std::size_t nbytes = n * dtype_size(a.dtype);
      if (nbytes > body - pos) throw fail("truncated data for array '" + name + "'");
      a.bytes.assign(bytes.begin() + long(pos), bytes.begin() + long(pos + nbytes));
      pos += nbytes;
      c.arrays_[name] = std::move(a);
    }
    if (pos != body) throw fail("trailing bytes after last array");
    return c;
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto bytes = serialize();
    // Write-then-rename so a crash never leaves a half-written checkpoint.
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw IoError("cannot open " + tmp + " for writing");
      out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
      if (!out) throw IoError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

  static Container load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return deserialize(bytes, path.string());
  }

 private:
  std::map<std::string, StoredArray> arrays_;
};

// Parameters of a network as "<prefix>.<index>" arrays.
template <typename Net>
void put_parameters(Container& c, const std::string& prefix, const Net& net) {
  auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) c.put(prefix + "." + std::to_string(i), *params[i]);
}

template <typename Net>
void get_parameters(const Container& c, const std::string& prefix, Net& net) {
  auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    using T = typename std::remove_reference_t<decltype(*params[i])>::value_type;
    Tensor<T> t = c.get<T>(prefix + "." + std::to_string(i));
    if (t.shape() != params[i]->shape()) {
      throw ConfigError("checkpoint array " + prefix + "." + std::to_string(i) + " has shape " +
                        shape_str(t.shape()) + ", model expects " + shape_str(params[i]->shape()));
    }
    *params[i] = std::move(t);
  }
  if (c.contains(prefix + "." + std::to_string(params.size()))) {
    throw ConfigError("checkpoint holds more '" + prefix + "' arrays than the model has parameters");
  }
}

}  // namespace pdcl::io
