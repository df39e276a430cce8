#pragma once

#include <Eigen/Dense>

#include <cassert>
#include <cstdint>
#include <new>
#include <numeric>
#include <span>
#include <vector>

namespace magik {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatF = Eigen::Map<MatF>;
using CMapMatF = Eigen::Map<const MatF>;
using VecF = Eigen::VectorXf;

/// 64-byte-aligned allocation for numeric buffers. Vectorized kernels peel
/// loop heads based on the address modulo the packet size; keeping every
/// buffer identically aligned makes summation order independent of where the
/// heap happens to place an instance, so seeded runs are bitwise
/// reproducible.
template <class T>
struct AlignedAlloc {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAlloc<U>&) const {
    return true;
  }
};

/// Dense row-major float tensor. Image batches use NHWC layout so that conv
/// im2col rows and per-channel FiLM both touch contiguous memory.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(count(shape_), 0.0f);
  }
  Tensor(std::vector<int> shape, float fill) : shape_(std::move(shape)) {
    data_.assign(count(shape_), fill);
  }

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  std::span<float> span() { return {data_.data(), data_.size()}; }
  std::span<const float> span() const { return {data_.data(), data_.size()}; }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(0.0f); }

  /// Reshape in place, reallocating only when the element count changes.
  /// Existing contents are preserved when the count is unchanged; new storage
  /// is uninitialized in the sense that callers are expected to overwrite it.
  void resize(std::vector<int> shape) {
    std::int64_t n = count(shape);
    shape_ = std::move(shape);
    data_.resize(static_cast<std::size_t>(n));
  }

  /// View as a rows x cols Eigen matrix; total element count must match.
  MapMatF mat(int rows, int cols) {
    assert(static_cast<std::int64_t>(rows) * cols == size());
    return MapMatF(data_.data(), rows, cols);
  }
  CMapMatF mat(int rows, int cols) const {
    assert(static_cast<std::int64_t>(rows) * cols == size());
    return CMapMatF(data_.data(), rows, cols);
  }

  /// Leading-axis matrix view: (shape[0], size/shape[0]).
  MapMatF mat2d() { return mat(shape_[0], static_cast<int>(size() / shape_[0])); }
  CMapMatF mat2d() const { return mat(shape_[0], static_cast<int>(size() / shape_[0])); }

  Tensor reshaped(std::vector<int> shape) const {
    assert(count(shape) == size());
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  std::vector<int> shape_;
  std::vector<float, AlignedAlloc<float>> data_;
};

inline bool all_finite(std::span<const float> xs) {
  for (float x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace magik
