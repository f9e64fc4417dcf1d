#include "hmr/array_store.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace hmr::io {

namespace fs = std::filesystem;
using nlohmann::json;

const char* dtype_name(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i32: return "i32";
    case DType::i64: return "i64";
    case DType::u8: return "u8";
  }
  return "?";
}

DType dtype_from_name(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  if (s == "i32") return DType::i32;
  if (s == "i64") return DType::i64;
  if (s == "u8") return DType::u8;
  throw IntegrityError("unknown dtype: " + s);
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i32: return 4;
    case DType::i64: return 8;
    case DType::u8: return 1;
  }
  return 0;
}

std::int64_t Array::numel() const {
  return static_cast<std::int64_t>(bytes.size() / dtype_size(dtype));
}

template <typename T>
Array Array::from_tensor(const ad::Tensor<T>& t) {
  Array a;
  a.dtype = std::is_same_v<T, float> ? DType::f32 : DType::f64;
  a.shape = t.shape();
  a.bytes.resize(sizeof(T) * static_cast<std::size_t>(t.numel()));
  std::memcpy(a.bytes.data(), t.data(), a.bytes.size());
  return a;
}

template Array Array::from_tensor<float>(const ad::Tensor<float>&);
template Array Array::from_tensor<double>(const ad::Tensor<double>&);

Array Array::from_ints(const std::vector<int>& v, std::vector<int> shape) {
  Array a;
  a.dtype = DType::i32;
  a.shape = shape.empty() ? std::vector<int>{static_cast<int>(v.size())}
                          : std::move(shape);
  a.bytes.resize(sizeof(int) * v.size());
  std::memcpy(a.bytes.data(), v.data(), a.bytes.size());
  return a;
}

template <typename T>
ad::Tensor<T> Array::to_tensor() const {
  ad::Tensor<T> t(shape);
  const std::int64_t n = numel();
  if (t.numel() != n) throw IntegrityError("array: shape/byte-size mismatch");
  switch (dtype) {
    case DType::f32: {
      const float* p = reinterpret_cast<const float*>(bytes.data());
      for (std::int64_t i = 0; i < n; ++i) t[i] = static_cast<T>(p[i]);
      break;
    }
    case DType::f64: {
      const double* p = reinterpret_cast<const double*>(bytes.data());
      for (std::int64_t i = 0; i < n; ++i) t[i] = static_cast<T>(p[i]);
      break;
    }
    case DType::i32: {
      const std::int32_t* p = reinterpret_cast<const std::int32_t*>(bytes.data());
      for (std::int64_t i = 0; i < n; ++i) t[i] = static_cast<T>(p[i]);
      break;
    }
    default:
      throw IntegrityError("array: unsupported dtype for tensor view");
  }
  return t;
}

template ad::Tensor<float> Array::to_tensor<float>() const;
template ad::Tensor<double> Array::to_tensor<double>() const;

std::vector<int> Array::to_ints() const {
  if (dtype != DType::i32) throw IntegrityError("array: expected i32");
  std::vector<int> v(bytes.size() / sizeof(int));
  std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

void ArrayStore::put(const std::string& name, Array a) {
  arrays_[name] = std::move(a);
}

const Array& ArrayStore::get(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end())
    throw IntegrityError("array store: missing array '" + name + "'");
  return it->second;
}

std::vector<std::string> ArrayStore::names() const {
  std::vector<std::string> out;
  out.reserve(arrays_.size());
  for (const auto& [k, v] : arrays_) out.push_back(k);
  return out;
}

void ArrayStore::merge(const ArrayStore& other, const std::string& prefix) {
  for (const auto& name : other.names())
    arrays_[prefix + name] = other.get(name);
}

ArrayStore ArrayStore::extract(const std::string& prefix,
                               const std::string& meta_key) const {
  ArrayStore out;
  for (const auto& [name, a] : arrays_)
    if (name.rfind(prefix, 0) == 0) out.arrays_[name.substr(prefix.size())] = a;
  if (!meta_key.empty() && metadata_.contains(meta_key))
    out.metadata_ = metadata_.at(meta_key);
  return out;
}

std::uint64_t ArrayStore::content_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, a] : arrays_) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(a.bytes.data(), a.bytes.size(), h);
  }
  const std::string meta = metadata_.dump();
  return fnv1a64(meta.data(), meta.size(), h);
}

namespace {

json describe(const std::string& name, const Array& a, const std::string& file,
              std::uint64_t offset) {
  json j;
  j["name"] = name;
  j["dtype"] = dtype_name(a.dtype);
  j["shape"] = a.shape;
  j["file"] = file;
  j["byte_offset"] = offset;
  j["byte_size"] = a.bytes.size();
  j["checksum"] = to_hex(a.checksum());
  return j;
}

void check_described(const json& f, const Array& a) {
  if (to_hex(a.checksum()) != f.at("checksum").get<std::string>())
    throw IntegrityError("array store: checksum mismatch for '" +
                         f.at("name").get<std::string>() + "'");
}

Array read_described(const json& f, std::istream& in, std::uint64_t base) {
  Array a;
  a.dtype = dtype_from_name(f.at("dtype").get<std::string>());
  a.shape = f.at("shape").get<std::vector<int>>();
  const auto size = f.at("byte_size").get<std::uint64_t>();
  a.bytes.resize(size);
  in.seekg(static_cast<std::streamoff>(base + f.at("byte_offset").get<std::uint64_t>()));
  in.read(reinterpret_cast<char*>(a.bytes.data()),
          static_cast<std::streamsize>(size));
  if (!in) throw IntegrityError("array store: short read");
  return a;
}

}  // namespace

void ArrayStore::save_dir(const std::string& dir) const {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "hmr-array-dir";
  manifest["version"] = 1;
  manifest["metadata"] = metadata_;
  manifest["fields"] = json::array();
  for (const auto& [name, a] : arrays_) {
    const std::string file = name + ".bin";
    std::ofstream out(fs::path(dir) / file, std::ios::binary);
    if (!out) throw InputError("array store: cannot write " + file);
    out.write(reinterpret_cast<const char*>(a.bytes.data()),
              static_cast<std::streamsize>(a.bytes.size()));
    manifest["fields"].push_back(describe(name, a, file, 0));
  }
  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << manifest.dump(2) << '\n';
}

ArrayStore ArrayStore::load_dir(const std::string& dir, bool verify) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw IntegrityError("array store: missing manifest in " + dir);
  json manifest;
  try {
    mf >> manifest;
  } catch (const std::exception& e) {
    throw IntegrityError(std::string("array store: bad manifest: ") + e.what());
  }
  ArrayStore store;
  store.metadata_ = manifest.value("metadata", json::object());
  for (const auto& f : manifest.at("fields")) {
    std::ifstream in(fs::path(dir) / f.at("file").get<std::string>(),
                     std::ios::binary);
    if (!in)
      throw IntegrityError("array store: missing field file " +
                           f.at("file").get<std::string>());
    Array a = read_described(f, in, 0);
    if (verify) check_described(f, a);
    store.arrays_[f.at("name").get<std::string>()] = std::move(a);
  }
  return store;
}

void ArrayStore::save_file(const std::string& path) const {
  json header;
  header["format"] = "hmr-array-pack";
  header["version"] = 1;
  header["metadata"] = metadata_;
  header["fields"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, a] : arrays_) {
    header["fields"].push_back(describe(name, a, "", offset));
    offset += a.bytes.size();
  }
  const std::string htext = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("array store: cannot write " + path);
  const char magic[8] = {'H', 'M', 'R', 'P', 'A', 'C', 'K', '1'};
  out.write(magic, 8);
  const std::uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& [name, a] : arrays_)
    out.write(reinterpret_cast<const char*>(a.bytes.data()),
              static_cast<std::streamsize>(a.bytes.size()));
}

ArrayStore ArrayStore::load_file(const std::string& path, bool verify) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("array store: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "HMRPACK1", 8) != 0)
    throw IntegrityError("array store: bad magic in " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IntegrityError("array store: truncated header");
  json header;
  try {
    header = json::parse(htext);
  } catch (const std::exception& e) {
    throw IntegrityError(std::string("array store: bad header: ") + e.what());
  }
  const std::uint64_t base = 16 + hlen;
  ArrayStore store;
  store.metadata_ = header.value("metadata", json::object());
  for (const auto& f : header.at("fields")) {
    Array a = read_described(f, in, base);
    if (verify) check_described(f, a);
    store.arrays_[f.at("name").get<std::string>()] = std::move(a);
  }
  return store;
}

std::uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("file_hash: cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

}  // namespace hmr::io
