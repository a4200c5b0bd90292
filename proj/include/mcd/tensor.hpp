#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <cstdlib>
#include <new>
#include <numeric>
#include <vector>

#include "mcd/common.hpp"

namespace mcd {

// Fixed 64-byte alignment for every tensor buffer. Vectorized reductions
// split work at alignment boundaries, so letting the allocator pick the
// phase would make summation order (and thus low-order bits) depend on heap
// layout; pinning the alignment keeps results bit-reproducible run to run.
template <typename T>
struct AlignedAllocator {
  static constexpr size_t kAlign = 64;
  using value_type = T;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(size_t n) {
    const size_t bytes = ((n * sizeof(T) + kAlign - 1) / kAlign) * kAlign;
    void* p = std::aligned_alloc(kAlign, bytes);
    if (p == nullptr) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, size_t) noexcept { std::free(p); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
  template <typename U>
  bool operator!=(const AlignedAllocator<U>&) const { return false; }
};

// Dense row-major tensor. Thin container; math happens through Eigen maps.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(size_t(numel_of(shape_)), T(0));
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      MCD_CHECK(d >= 0, "negative dimension ", d);
      n *= d;
    }
    return n;
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  int ndim() const { return int(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(size_t(i)); }
  int64_t numel() const { return int64_t(data_.size()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](int64_t i) { return data_[size_t(i)]; }
  const T& operator[](int64_t i) const { return data_[size_t(i)]; }

  // 4-d convenience accessor for (N, C, H, W) layouts.
  T& at4(int64_t n, int64_t c, int64_t y, int64_t x) {
    return data_[size_t(((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
  }
  const T& at4(int64_t n, int64_t c, int64_t y, int64_t x) const {
    return data_[size_t(((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
  }
  T& at2(int64_t i, int64_t j) { return data_[size_t(i * shape_[1] + j)]; }
  const T& at2(int64_t i, int64_t j) const { return data_[size_t(i * shape_[1] + j)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  void reshape(std::vector<int64_t> shape) {
    MCD_CHECK(numel_of(shape) == numel(), "reshape changes element count");
    shape_ = std::move(shape);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  std::vector<int64_t> shape_;
  std::vector<T, AlignedAllocator<T>> data_;
};

template <typename T>
using EigenRowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenRowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EigenRowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, int64_t rows, int64_t cols) {
  MCD_CHECK(rows * cols == t.numel(), "matrix view mismatch: ", rows, "x", cols,
            " vs numel ", t.numel());
  return MatMap<T>(t.data(), rows, cols);
}

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, int64_t rows, int64_t cols) {
  MCD_CHECK(rows * cols == t.numel(), "matrix view mismatch: ", rows, "x", cols,
            " vs numel ", t.numel());
  return ConstMatMap<T>(t.data(), rows, cols);
}

template <typename T>
VecMap<T> as_vector(Tensor<T>& t) {
  return VecMap<T>(t.data(), t.numel());
}

template <typename T>
ConstVecMap<T> as_vector(const Tensor<T>& t) {
  return ConstVecMap<T>(t.data(), t.numel());
}

}  // namespace mcd
