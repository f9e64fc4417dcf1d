#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hmr/tensor.hpp"

namespace hmr::io {

enum class DType { f32, f64, i32, i64, u8 };

const char* dtype_name(DType d);
DType dtype_from_name(const std::string& s);
std::size_t dtype_size(DType d);

/// A named, typed, shaped block of little-endian bytes.
struct Array {
  DType dtype = DType::f32;
  std::vector<int> shape;
  std::vector<std::uint8_t> bytes;

  std::int64_t numel() const;

  template <typename T>
  static Array from_tensor(const ad::Tensor<T>& t);
  static Array from_ints(const std::vector<int>& v,
                         std::vector<int> shape = {});

  template <typename T>
  ad::Tensor<T> to_tensor() const;
  std::vector<int> to_ints() const;

  std::uint64_t checksum() const { return fnv1a64(bytes.data(), bytes.size()); }
};

/// Container of named arrays plus JSON metadata. Two on-disk forms:
///  - directory: one flat little-endian .bin per array + manifest.json
///  - single file: JSON header with array offsets followed by raw payload
class ArrayStore {
 public:
  void put(const std::string& name, Array a);
  template <typename T>
  void put_tensor(const std::string& name, const ad::Tensor<T>& t) {
    put(name, Array::from_tensor(t));
  }
  const Array& get(const std::string& name) const;
  bool has(const std::string& name) const { return arrays_.count(name) > 0; }
  std::vector<std::string> names() const;

  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

  /// Copies every array of `other` under `prefix`.
  void merge(const ArrayStore& other, const std::string& prefix);
  /// Extracts the arrays under `prefix` (prefix stripped), with metadata
  /// taken from `meta_key` in this store's metadata when present.
  ArrayStore extract(const std::string& prefix, const std::string& meta_key) const;

  /// Hash over all array bytes and metadata (order-stable).
  std::uint64_t content_hash() const;

  void save_dir(const std::string& dir) const;
  static ArrayStore load_dir(const std::string& dir, bool verify = true);

  void save_file(const std::string& path) const;
  static ArrayStore load_file(const std::string& path, bool verify = true);

 private:
  std::map<std::string, Array> arrays_;
  nlohmann::json metadata_ = nlohmann::json::object();
};

/// FNV-1a hash of an existing file's bytes (for run manifests).
std::uint64_t file_hash(const std::string& path);

}  // namespace hmr::io
