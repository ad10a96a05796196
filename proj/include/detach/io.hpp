#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "detach/params.hpp"
#include "detach/tensor.hpp"

namespace detach {
namespace io {

using json = nlohmann::json;

inline constexpr char kMagic[4] = {'D', 'T', 'C', 'H'};
inline constexpr uint32_t kFormatVersion = 1;

struct CorruptFileError : std::runtime_error {
  CorruptFileError(const std::string& path, uint64_t offset, const std::string& what)
      : std::runtime_error("corrupt container " + path + " at byte offset " +
                           std::to_string(offset) + ": " + what) {}
};

namespace detail {

struct Reader {
  std::ifstream f;
  std::string path;
  uint64_t offset = 0;
  Reader(const std::string& p) : f(p, std::ios::binary), path(p) {
    if (!f) throw std::runtime_error("cannot open " + p);
  }
  void read(void* dst, size_t n, const char* what) {
    f.read(reinterpret_cast<char*>(dst), std::streamsize(n));
    if (size_t(f.gcount()) != n) throw CorruptFileError(path, offset, std::string("truncated ") + what);
    offset += n;
  }
  uint32_t u32(const char* what) {
    uint32_t v;
    read(&v, 4, what);
    return v;
  }
};

inline void write_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<char*>(&v), 4); }

inline void write_tensor_body(std::ofstream& f, const Tensor<float>& t) {
  write_u32(f, uint32_t(t.rank()));
  for (int64_t d : t.shape) write_u32(f, uint32_t(d));
  f.write(reinterpret_cast<const char*>(t.data.data()), std::streamsize(t.data.size() * 4));
}

inline Tensor<float> read_tensor_body(Reader& r) {
  uint32_t rank = r.u32("rank");
  if (rank > 8) throw CorruptFileError(r.path, r.offset - 4, "implausible rank");
  std::vector<int64_t> shape;
  int64_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t d = r.u32("dims");
    shape.push_back(int64_t(d));
    n *= int64_t(d);
  }
  Tensor<float> t(shape);
  r.read(t.data.data(), size_t(n) * 4, "payload");
  return t;
}

}  // namespace detail

// Single-tensor record: magic "DTCH", version u32, rank u32, dims u32[],
// little-endian f32 payload.
inline void write_tensor_record(const std::string& path, const Tensor<float>& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(kMagic, 4);
  detail::write_u32(f, kFormatVersion);
  detail::write_tensor_body(f, t);
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline Tensor<float> read_tensor_record(const std::string& path) {
  detail::Reader r(path);
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw CorruptFileError(path, 0, "bad magic");
  uint32_t version = r.u32("version");
  if (version != kFormatVersion)
    throw CorruptFileError(path, 4, "unsupported version " + std::to_string(version));
  return detail::read_tensor_body(r);
}

// Checkpoint: the same container with a JSON metadata blob and named
// sections. Layout: magic, version u32, meta_len u32, meta bytes,
// nsections u32, then per section: name_len u32, name bytes, tensor body.
struct Checkpoint {
  json metadata;
  std::vector<std::string> order;
  std::map<std::string, Tensor<float>> tensors;

  void put(const std::string& name, const Tensor<float>& t) {
    if (!tensors.count(name)) order.push_back(name);
    tensors[name] = t;
  }

  template <class S>
  void put_params(const std::string& prefix, const nn::ParamSet<S>& p) {
    for (auto& name : p.order) put(prefix + "/" + name, p.values.at(name).template cast<float>());
  }

  // Fills values of an already-registered ParamSet from prefixed sections.
  template <class S>
  void get_params(const std::string& prefix, nn::ParamSet<S>& p,
                  std::vector<std::string>* missing = nullptr) const {
    for (auto& name : p.order) {
      auto it = tensors.find(prefix + "/" + name);
      if (it == tensors.end()) {
        if (missing)
          missing->push_back(prefix + "/" + name);
        else
          throw std::runtime_error("checkpoint missing section " + prefix + "/" + name);
        continue;
      }
      if (it->second.shape != p.value(name).shape)
        throw std::runtime_error("checkpoint section " + prefix + "/" + name + " has shape " +
                                 it->second.shape_str() + ", expected " +
                                 p.value(name).shape_str());
      p.value(name) = it->second.template cast<S>();
    }
  }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(kMagic, 4);
  detail::write_u32(f, kFormatVersion);
  std::string meta = ck.metadata.dump();
  detail::write_u32(f, uint32_t(meta.size()));
  f.write(meta.data(), std::streamsize(meta.size()));
  detail::write_u32(f, uint32_t(ck.order.size()));
  for (auto& name : ck.order) {
    detail::write_u32(f, uint32_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    detail::write_tensor_body(f, ck.tensors.at(name));
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

// `warnings`, when given, collects version or hash mismatches instead of
// failing; structural corruption always throws.
inline Checkpoint load_checkpoint(const std::string& path,
                                  std::vector<std::string>* warnings = nullptr) {
  detail::Reader r(path);
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw CorruptFileError(path, 0, "bad magic");
  uint32_t version = r.u32("version");
  if (version != kFormatVersion) {
    std::string msg = "checkpoint version " + std::to_string(version) + " != " +
                      std::to_string(kFormatVersion) + "; best-effort load";
    if (warnings)
      warnings->push_back(msg);
    else
      throw CorruptFileError(path, 4, msg);
  }
  uint32_t meta_len = r.u32("meta length");
  std::string meta(meta_len, '\0');
  r.read(meta.data(), meta_len, "metadata");
  Checkpoint ck;
  ck.metadata = json::parse(meta, nullptr, false);
  if (ck.metadata.is_discarded())
    throw CorruptFileError(path, 12, "metadata is not valid JSON");
  uint32_t nsec = r.u32("section count");
  for (uint32_t i = 0; i < nsec; ++i) {
    uint32_t name_len = r.u32("section name length");
    if (name_len > 4096) throw CorruptFileError(path, r.offset - 4, "implausible section name");
    std::string name(name_len, '\0');
    r.read(name.data(), name_len, "section name");
    ck.put(name, detail::read_tensor_body(r));
  }
  return ck;
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
  return std::string(buf);
}

inline std::string config_hash(const json& j) { return hex64(fnv1a64(j.dump())); }

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(content.data(), std::streamsize(content.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

}  // namespace io
}  // namespace detach
