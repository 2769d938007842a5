#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "pclsr/errors.hpp"

namespace pclsr::ckpt {

inline constexpr std::uint32_t kSchemaVersion = 1;

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

struct ArrayBlob {
  Dtype dtype = Dtype::f64;
  std::vector<std::int64_t> shape;
  std::vector<unsigned char> bytes;

  template <typename T>
  static ArrayBlob from(const std::vector<T>& v, std::vector<std::int64_t> shape_ = {});
  template <typename T>
  std::vector<T> to() const;
  std::int64_t numel() const;
};

/// Everything a training run needs to resume: both networks' parameters,
/// optimizer state, the serialized RNG streams, the config snapshot and the
/// global step. Arrays and RNG states keep their insertion order.
struct Checkpoint {
  std::uint32_t schema = kSchemaVersion;
  std::uint64_t step = 0;
  std::string config_json;
  std::vector<std::pair<std::string, std::string>> rng_states;
  std::vector<std::pair<std::string, ArrayBlob>> arrays;

  const ArrayBlob* find(const std::string& name) const;
  const std::string* find_rng(const std::string& name) const;
};

/// Atomic write: temp file in the same directory, then rename.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);

/// Throws SchemaError when the schema version differs from this build's.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

template <typename T>
ArrayBlob ArrayBlob::from(const std::vector<T>& v, std::vector<std::int64_t> shape_) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  ArrayBlob b;
  b.dtype = std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64;
  b.shape = shape_.empty() ? std::vector<std::int64_t>{static_cast<std::int64_t>(v.size())}
                           : std::move(shape_);
  b.bytes.resize(v.size() * sizeof(T));
  std::memcpy(b.bytes.data(), v.data(), b.bytes.size());
  return b;
}

template <typename T>
std::vector<T> ArrayBlob::to() const {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  const Dtype want = std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64;
  if (dtype != want) throw SchemaError("ArrayBlob: dtype mismatch");
  std::vector<T> v(bytes.size() / sizeof(T));
  std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

}  // namespace pclsr::ckpt
