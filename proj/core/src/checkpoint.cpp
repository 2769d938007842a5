#include "pclsr/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace pclsr::ckpt {

namespace {

constexpr char kMagic[8] = {'P', 'C', 'L', 'S', 'R', 'B', 'I', 'N'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_str(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

std::string get_str(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw IoError("checkpoint: truncated file");
  return s;
}

}  // namespace

std::int64_t ArrayBlob::numel() const {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

const ArrayBlob* Checkpoint::find(const std::string& name) const {
  for (const auto& [k, v] : arrays)
    if (k == name) return &v;
  return nullptr;
}

const std::string* Checkpoint::find_rng(const std::string& name) const {
  for (const auto& [k, v] : rng_states)
    if (k == name) return &v;
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot write " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, c.schema);
    put<std::uint64_t>(os, c.step);
    put_str(os, c.config_json);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(c.rng_states.size()));
    for (const auto& [name, state] : c.rng_states) {
      put_str(os, name);
      put_str(os, state);
    }
    put<std::uint32_t>(os, static_cast<std::uint32_t>(c.arrays.size()));
    for (const auto& [name, blob] : c.arrays) {
      put_str(os, name);
      put<std::uint8_t>(os, static_cast<std::uint8_t>(blob.dtype));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(blob.shape.size()));
      for (std::int64_t d : blob.shape) put<std::int64_t>(os, d);
      put<std::uint64_t>(os, blob.bytes.size());
      os.write(reinterpret_cast<const char*>(blob.bytes.data()),
               static_cast<std::streamsize>(blob.bytes.size()));
    }
    os.flush();
    if (!os) throw IoError("checkpoint: write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("checkpoint: rename failed: " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("checkpoint: bad magic in " + path.string());

  Checkpoint c;
  c.schema = get<std::uint32_t>(is);
  if (c.schema != kSchemaVersion)
    throw SchemaError("checkpoint: schema version " + std::to_string(c.schema) +
                      " does not match expected " + std::to_string(kSchemaVersion));
  c.step = get<std::uint64_t>(is);
  c.config_json = get_str(is);
  const auto n_rng = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_rng; ++i) {
    std::string name = get_str(is);
    std::string state = get_str(is);
    c.rng_states.emplace_back(std::move(name), std::move(state));
  }
  const auto n_arr = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_arr; ++i) {
    std::string name = get_str(is);
    ArrayBlob b;
    b.dtype = static_cast<Dtype>(get<std::uint8_t>(is));
    const auto ndim = get<std::uint32_t>(is);
    b.shape.resize(ndim);
    for (auto& d : b.shape) d = get<std::int64_t>(is);
    const auto nbytes = get<std::uint64_t>(is);
    b.bytes.resize(nbytes);
    is.read(reinterpret_cast<char*>(b.bytes.data()), static_cast<std::streamsize>(nbytes));
    if (!is) throw IoError("checkpoint: truncated array payload");
    const std::size_t esz = b.dtype == Dtype::f32 ? 4 : 8;
    if (static_cast<std::uint64_t>(b.numel()) * esz != nbytes)
      throw IntegrityError("checkpoint: array " + name + " size does not match its shape");
    c.arrays.emplace_back(std::move(name), std::move(b));
  }
  return c;
}

}  // namespace pclsr::ckpt
