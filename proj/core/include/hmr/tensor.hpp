#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "hmr/common.hpp"

namespace hmr::ad {

/// 64-byte aligned storage keeps Eigen's vectorized kernels on the same code
/// path for every allocation, which makes results bitwise reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    void* p = ::operator new(n * sizeof(T), std::align_val_t(kAlign));
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(kAlign));
  }
  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

/// Dense row-major tensor. Rank metadata is carried in `shape`; most ops view
/// the data as a 2D matrix (leading dims folded into rows, last dim = cols).
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(count(shape_)), T(0));
  }

  Tensor(std::initializer_list<int> shape)
      : Tensor(std::vector<int>(shape)) {}

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor from(std::vector<int> shape, const std::vector<T>& values) {
    if (count(shape) != static_cast<std::int64_t>(values.size()))
      throw InputError("Tensor::from: value count does not match shape");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_.assign(values.begin(), values.end());
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  /// Product of all dims but the last.
  std::int64_t rows() const {
    if (shape_.empty()) return data_.empty() ? 0 : 1;
    return numel() / shape_.back();
  }
  std::int64_t cols() const { return shape_.empty() ? numel() : shape_.back(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  T operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  MatMap<T> mat() { return MatMap<T>(data(), rows(), cols()); }
  ConstMatMap<T> mat() const { return ConstMatMap<T>(data(), rows(), cols()); }
  MatMap<T> mat(std::int64_t r, std::int64_t c) {
    if (r * c != numel()) throw InputError("Tensor::mat: bad view shape");
    return MatMap<T>(data(), r, c);
  }
  ConstMatMap<T> mat(std::int64_t r, std::int64_t c) const {
    if (r * c != numel()) throw InputError("Tensor::mat: bad view shape");
    return ConstMatMap<T>(data(), r, c);
  }
  ArrMap<T> arr() { return ArrMap<T>(data(), numel()); }
  ConstArrMap<T> arr() const { return ConstArrMap<T>(data(), numel()); }

  void reshape_inplace(std::vector<int> shape) {
    if (count(shape) != numel()) throw InputError("Tensor::reshape: numel mismatch");
    shape_ = std::move(shape);
  }

  Tensor reshaped(std::vector<int> shape) const {
    Tensor t = *this;
    t.reshape_inplace(std::move(shape));
    return t;
  }

  void set_zero() { std::fill(data_.begin(), data_.end(), T(0)); }

  bool all_finite() const {
    for (const T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out = Tensor<U>(shape_);
    for (std::int64_t i = 0; i < numel(); ++i)
      out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (const int d : shape) {
      if (d < 0) throw InputError("Tensor: negative dimension");
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<int> shape_;
  std::vector<T, AlignedAllocator<T>> data_;
};

}  // namespace hmr::ad
