#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hsalab/check.hpp"
#include "hsalab/tensor.hpp"

namespace hsalab {

// Checkpoint container: a textual header listing (name, dtype, shape,
// byte-offset, byte-size) entries, then raw little-endian payloads. Offsets
// are relative to the first byte after the "data" line. Round trips are
// bit-exact; payloads are written from memory on a little-endian host.
//
//   HSALAB-CKPT v1
//   count <N>
//   entry <name> <dtype> <d0xd1x...> <offset> <nbytes>
//   ...
//   data
//   <raw bytes>

enum class Dtype { f32, f64, i32, u8, u64 };

inline const char* dtype_name(Dtype d) {
  switch (d) {
    case Dtype::f32: return "f32";
    case Dtype::f64: return "f64";
    case Dtype::i32: return "i32";
    case Dtype::u8: return "u8";
    case Dtype::u64: return "u64";
  }
  return "?";
}

inline Dtype dtype_from_name(const std::string& s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  if (s == "i32") return Dtype::i32;
  if (s == "u8") return Dtype::u8;
  if (s == "u64") return Dtype::u64;
  throw ContractError("checkpoint: unknown dtype '" + s + "'");
}

template <typename T>
struct dtype_of;
template <> struct dtype_of<float> { static constexpr Dtype value = Dtype::f32; };
template <> struct dtype_of<double> { static constexpr Dtype value = Dtype::f64; };
template <> struct dtype_of<std::int32_t> { static constexpr Dtype value = Dtype::i32; };
template <> struct dtype_of<std::uint8_t> { static constexpr Dtype value = Dtype::u8; };
template <> struct dtype_of<std::uint64_t> { static constexpr Dtype value = Dtype::u64; };

struct CheckpointEntry {
  std::string name;
  Dtype dtype = Dtype::f32;
  std::vector<std::size_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

class CheckpointWriter {
 public:
  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    add_raw(name, dtype_of<T>::value, t.shape(), t.data(), t.size() * sizeof(T));
  }

  template <typename T>
  void add_scalar(const std::string& name, T v) {
    add_raw(name, dtype_of<T>::value, {1}, &v, sizeof(T));
  }

  template <typename T>
  void add_vector(const std::string& name, const std::vector<T>& v) {
    add_raw(name, dtype_of<T>::value, {v.size()}, v.data(), v.size() * sizeof(T));
  }

  void add_raw(const std::string& name, Dtype dtype, const std::vector<std::size_t>& shape,
               const void* bytes, std::uint64_t nbytes) {
    HSALAB_CHECK(name.find_first_of(" \t\n") == std::string::npos,
                 "checkpoint: whitespace in entry name");
    CheckpointEntry e;
    e.name = name;
    e.dtype = dtype;
    e.shape = shape;
    e.offset = static_cast<std::uint64_t>(payload_.size());
    e.nbytes = nbytes;
    entries_.push_back(e);
    const auto* p = static_cast<const std::uint8_t*>(bytes);
    payload_.insert(payload_.end(), p, p + nbytes);
  }

  void write(const std::string& path) const {
    std::ostringstream header;
    header << "HSALAB-CKPT v1\n";
    header << "count " << entries_.size() << "\n";
    for (const auto& e : entries_) {
      header << "entry " << e.name << " " << dtype_name(e.dtype) << " ";
      if (e.shape.empty()) {
        header << "-";
      } else {
        for (std::size_t i = 0; i < e.shape.size(); ++i) {
          if (i) header << "x";
          header << e.shape[i];
        }
      }
      header << " " << e.offset << " " << e.nbytes << "\n";
    }
    header << "data\n";

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ContractError("checkpoint: cannot open '" + path + "' for writing");
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    if (!payload_.empty()) {
      out.write(reinterpret_cast<const char*>(payload_.data()),
                static_cast<std::streamsize>(payload_.size()));
    }
    if (!out) throw ContractError("checkpoint: write failed for '" + path + "'");
  }

 private:
  std::vector<CheckpointEntry> entries_;
  std::vector<std::uint8_t> payload_;
};

class CheckpointReader {
 public:
  explicit CheckpointReader(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContractError("checkpoint: cannot open '" + path + "'");
    std::string line;
    std::getline(in, line);
    HSALAB_CHECK(line == "HSALAB-CKPT v1", "checkpoint: bad magic in '" + path + "'");
    std::getline(in, line);
    std::istringstream cs(line);
    std::string kw;
    std::size_t count = 0;
    cs >> kw >> count;
    HSALAB_CHECK(kw == "count", "checkpoint: malformed count line");
    for (std::size_t i = 0; i < count; ++i) {
      std::getline(in, line);
      std::istringstream es(line);
      std::string tag, name, dt, shape_s;
      CheckpointEntry e;
      es >> tag >> name >> dt >> shape_s >> e.offset >> e.nbytes;
      HSALAB_CHECK(tag == "entry" && es, "checkpoint: malformed entry line");
      e.name = name;
      e.dtype = dtype_from_name(dt);
      if (shape_s != "-") {
        std::size_t pos = 0;
        while (pos < shape_s.size()) {
          std::size_t next = shape_s.find('x', pos);
          if (next == std::string::npos) next = shape_s.size();
          e.shape.push_back(std::stoull(shape_s.substr(pos, next - pos)));
          pos = next + 1;
        }
      }
      index_[e.name] = entries_.size();
      entries_.push_back(std::move(e));
    }
    std::getline(in, line);
    HSALAB_CHECK(line == "data", "checkpoint: missing data sentinel");
    payload_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  const std::vector<CheckpointEntry>& entries() const { return entries_; }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const CheckpointEntry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("checkpoint: missing entry '" + name + "'");
    return entries_[it->second];
  }

  template <typename T>
  void read(const std::string& name, Tensor<T>& t) const {
    const auto& e = entry(name);
    HSALAB_CHECK(e.dtype == dtype_of<T>::value, "checkpoint: dtype mismatch for '" + name + "'");
    t.resize(e.shape);
    HSALAB_CHECK(e.nbytes == t.size() * sizeof(T), "checkpoint: size mismatch for '" + name + "'");
    copy_out(e, t.data());
  }

  template <typename T>
  T read_scalar(const std::string& name) const {
    const auto& e = entry(name);
    HSALAB_CHECK(e.dtype == dtype_of<T>::value && e.nbytes == sizeof(T),
                 "checkpoint: scalar mismatch for '" + name + "'");
    T v;
    copy_out(e, &v);
    return v;
  }

  template <typename T>
  std::vector<T> read_vector(const std::string& name) const {
    const auto& e = entry(name);
    HSALAB_CHECK(e.dtype == dtype_of<T>::value, "checkpoint: dtype mismatch for '" + name + "'");
    std::vector<T> v(e.nbytes / sizeof(T));
    copy_out(e, v.data());
    return v;
  }

 private:
  void copy_out(const CheckpointEntry& e, void* dst) const {
    HSALAB_CHECK(e.offset + e.nbytes <= payload_.size(), "checkpoint: truncated payload");
    std::memcpy(dst, payload_.data() + e.offset, e.nbytes);
  }

  std::vector<CheckpointEntry> entries_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::uint8_t> payload_;
};

}  // namespace hsalab
