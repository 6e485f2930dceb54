#pragma once

#include "uvsplat/io/atomic.hpp"
#include "uvsplat/math.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace uvsplat::io {

/// Named little-endian tensors behind an 8-byte magic and a version word.
///
/// Layout: magic[8], u32 version, u64 tag, u32 count, then per tensor:
/// u32 name length, name, u8 dtype, u32 rank, u64 dims[rank], raw data.
class TensorFile {
 public:
  enum DType : uint8_t { kF32 = 0, kI32 = 1, kU8 = 2, kU64 = 3, kF64 = 4 };

  struct Tensor {
    DType dtype = kF32;
    std::vector<uint64_t> shape;
    std::vector<unsigned char> bytes;
    uint64_t elements() const {
      uint64_t n = 1;
      for (auto d : shape) n *= d;
      return n;
    }
  };

  uint64_t tag = 0;  // free-form (the checkpoint stores its config hash here)

  template <typename T> void put_f32(const std::string& name, const std::vector<uint64_t>& shape, const T* data) {
    Tensor t{kF32, shape, {}};
    const uint64_t n = t.elements();
    t.bytes.resize(n * 4);
    for (uint64_t i = 0; i < n; ++i) {
      const float f = static_cast<float>(data[i]);
      std::memcpy(&t.bytes[i * 4], &f, 4);
    }
    tensors_[name] = std::move(t);
  }
  template <typename T> void put_f32(const std::string& name, const std::vector<T>& v) {
    put_f32(name, {v.size()}, v.data());
  }
  void put_f64(const std::string& name, const std::vector<double>& v) { put_raw(name, kF64, {v.size()}, v.data(), 8); }
  void put_f64(const std::string& name, const std::vector<uint64_t>& shape, const double* data) {
    put_raw(name, kF64, shape, data, 8);
  }
  void put_i32(const std::string& name, const std::vector<int32_t>& v) { put_raw(name, kI32, {v.size()}, v.data(), 4); }
  void put_u8(const std::string& name, const std::vector<unsigned char>& v) { put_raw(name, kU8, {v.size()}, v.data(), 1); }
  void put_u64(const std::string& name, const std::vector<uint64_t>& v) { put_raw(name, kU64, {v.size()}, v.data(), 8); }

  bool has(const std::string& name) const { return tensors_.count(name) > 0; }
  const Tensor& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw DataError("missing tensor '" + name + "'");
    return it->second;
  }

  template <typename T> std::vector<T> get_f32(const std::string& name) const {
    const Tensor& t = typed(name, kF32);
    std::vector<T> out(t.elements());
    for (size_t i = 0; i < out.size(); ++i) {
      float f;
      std::memcpy(&f, &t.bytes[i * 4], 4);
      out[i] = static_cast<T>(f);
    }
    return out;
  }
  std::vector<double> get_f64(const std::string& name) const { return get_raw<double>(name, kF64); }
  std::vector<int32_t> get_i32(const std::string& name) const { return get_raw<int32_t>(name, kI32); }
  std::vector<unsigned char> get_u8(const std::string& name) const { return get_raw<unsigned char>(name, kU8); }
  std::vector<uint64_t> get_u64(const std::string& name) const { return get_raw<uint64_t>(name, kU64); }

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  void write(std::ostream& os, const char magic[8], uint32_t version) const {
    os.write(magic, 8);
    pod(os, version);
    pod(os, tag);
    pod(os, static_cast<uint32_t>(tensors_.size()));
    for (const auto& [name, t] : tensors_) {
      pod(os, static_cast<uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      pod(os, static_cast<uint8_t>(t.dtype));
      pod(os, static_cast<uint32_t>(t.shape.size()));
      for (auto d : t.shape) pod(os, d);
      os.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
    }
  }

  void save(const std::string& path, const char magic[8], uint32_t version) const {
    write_atomically(path, [&](std::ostream& os) { write(os, magic, version); });
  }

  static TensorFile read(std::istream& is, const std::string& what, const char magic[8], uint32_t version) {
    char m[8];
    if (!is.read(m, 8) || std::memcmp(m, magic, 8) != 0)
      throw DataError(what + ": bad magic (expected " + std::string(magic, 8) + ")");
    TensorFile f;
    const auto ver = rpod<uint32_t>(is, what);
    if (ver != version) throw DataError(what + ": unsupported format version " + std::to_string(ver));
    f.tag = rpod<uint64_t>(is, what);
    const auto count = rpod<uint32_t>(is, what);
    for (uint32_t i = 0; i < count; ++i) {
      const auto len = rpod<uint32_t>(is, what);
      if (len > 4096) throw DataError(what + ": corrupt tensor name");
      std::string name(len, '\0');
      if (!is.read(name.data(), len)) throw DataError(what + ": truncated tensor name");
      Tensor t;
      t.dtype = static_cast<DType>(rpod<uint8_t>(is, what));
      if (t.dtype > kF64) throw DataError(what + ": tensor '" + name + "' has unknown dtype");
      const auto rank = rpod<uint32_t>(is, what);
      if (rank > 8) throw DataError(what + ": tensor '" + name + "' has bad rank");
      t.shape.resize(rank);
      for (auto& d : t.shape) d = rpod<uint64_t>(is, what);
      static constexpr int kSize[] = {4, 4, 1, 8, 8};
      const uint64_t bytes = t.elements() * kSize[t.dtype];
      if (bytes > (uint64_t(1) << 34)) throw DataError(what + ": tensor '" + name + "' is implausibly large");
      t.bytes.resize(bytes);
      if (!is.read(reinterpret_cast<char*>(t.bytes.data()), static_cast<std::streamsize>(bytes)))
        throw DataError(what + ": truncated tensor '" + name + "'");
      f.tensors_[name] = std::move(t);
    }
    return f;
  }

  static TensorFile load(const std::string& path, const char magic[8], uint32_t version) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path + "'");
    return read(is, path, magic, version);
  }

 private:
  void put_raw(const std::string& name, DType dt, const std::vector<uint64_t>& shape, const void* data, size_t elem) {
    Tensor t{dt, shape, {}};
    t.bytes.resize(t.elements() * elem);
    if (!t.bytes.empty()) std::memcpy(t.bytes.data(), data, t.bytes.size());
    tensors_[name] = std::move(t);
  }
  const Tensor& typed(const std::string& name, DType dt) const {
    const Tensor& t = get(name);
    if (t.dtype != dt) throw DataError("tensor '" + name + "' has unexpected dtype");
    return t;
  }
  template <typename T> std::vector<T> get_raw(const std::string& name, DType dt) const {
    const Tensor& t = typed(name, dt);
    std::vector<T> out(t.elements());
    if (!out.empty()) std::memcpy(out.data(), t.bytes.data(), t.bytes.size());
    return out;
  }
  template <typename P> static void pod(std::ostream& os, P v) { os.write(reinterpret_cast<const char*>(&v), sizeof(P)); }
  template <typename P> static P rpod(std::istream& is, const std::string& what) {
    P v;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(P))) throw DataError(what + ": truncated header");
    return v;
  }

  std::map<std::string, Tensor> tensors_;
};

}  // namespace uvsplat::io
