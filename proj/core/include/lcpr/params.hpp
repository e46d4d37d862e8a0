#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <shared_mutex>
#include <string>
#include <vector>

#include "lcpr/tensor.hpp"

namespace lcpr::nd {

// Named learnable parameters plus batchnorm running statistics (stored as
// non-trainable entries). Names are unique; shapes are fixed once created.
// Many readers / one writer: the optimizer step takes the exclusive lock.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    Tensor<T> tensor;
    bool trainable = true;
  };

  Tensor<T>& create(const std::string& name, Tensor<T> init, bool trainable = true) {
    auto [it, fresh] = entries_.emplace(name, Entry{std::move(init), trainable});
    if (!fresh) throw DataError("param store: duplicate name " + name);
    return it->second.tensor;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  Tensor<T>& get(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw DataError("param store: unknown name " + name);
    return it->second.tensor;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw DataError("param store: unknown name " + name);
    return it->second.tensor;
  }
  bool trainable(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw DataError("param store: unknown name " + name);
    return it->second.trainable;
  }

  // Overwrite values; the shape must match (shapes are immutable).
  void assign(const std::string& name, const Tensor<T>& v) {
    Tensor<T>& dst = get(name);
    if (!dst.same_shape(v))
      throw DataError("param store: shape change for " + name + ": " + shape_str(dst.shape) +
                      " -> " + shape_str(v.shape));
    dst.data = v.data;
  }

  const std::map<std::string, Entry>& entries() const { return entries_; }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, e] : entries_)
      if (e.trainable) n += e.tensor.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, e] : entries_) out.create(name, e.tensor.template cast<U>(), e.trainable);
    return out;
  }

  std::shared_mutex& mutex() const { return *mutex_; }

 private:
  std::map<std::string, Entry> entries_;
  // Held indirectly so the store stays movable.
  std::unique_ptr<std::shared_mutex> mutex_ = std::make_unique<std::shared_mutex>();
};

// --------------------------------------------------------------------------
// Checkpoint format: magic "LCPRWT01", little-endian u32 entry count; per
// entry u16 name length, name bytes, u8 rank, u32 dims[rank], f32 data.
// --------------------------------------------------------------------------

namespace detail {
template <typename V>
void write_le(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V read_le(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw DataError("checkpoint: truncated file");
  return v;
}
}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'L', 'C', 'P', 'R', 'W', 'T', '0', '1'};

inline void save_checkpoint(const ParamStore<float>& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 8);
  detail::write_le<uint32_t>(os, static_cast<uint32_t>(store.entries().size()));
  for (const auto& [name, e] : store.entries()) {
    if (name.size() > 0xffff) throw DataError("checkpoint: name too long");
    detail::write_le<uint16_t>(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<uint8_t>(os, static_cast<uint8_t>(e.tensor.rank()));
    for (int d : e.tensor.shape) detail::write_le<uint32_t>(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(e.tensor.ptr()),
             static_cast<std::streamsize>(e.tensor.size() * sizeof(float)));
  }
  if (!os) throw DataError("checkpoint: write failed for " + path);
}

// Loads raw name->tensor pairs; the caller wires trainability by rebuilding
// against a model layout.
inline std::map<std::string, Tensor<float>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DataError("checkpoint: bad magic in " + path);
  uint32_t count = detail::read_le<uint32_t>(is);
  std::map<std::string, Tensor<float>> out;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t len = detail::read_le<uint16_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    uint8_t rank = detail::read_le<uint8_t>(is);
    Shape shape;
    for (int r = 0; r < rank; ++r) shape.push_back(static_cast<int>(detail::read_le<uint32_t>(is)));
    Tensor<float> t(shape);
    is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!is) throw DataError("checkpoint: truncated tensor " + name);
    if (!out.emplace(name, std::move(t)).second)
      throw DataError("checkpoint: duplicate entry " + name);
  }
  return out;
}

}  // namespace lcpr::nd
