#pragma once

#include <cassert>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace oarstd {

// Dense row-major n-dimensional array. Rank-3 tensors hold volumes as
// (z, y, x); rank-5 tensors hold network activations as (batch, channel,
// depth, height, width).
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(count(shape_)), T{});
  }

  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != static_cast<std::int64_t>(data_.size()))
      throw std::invalid_argument("tensor data size does not match shape");
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }

  int dim(int i) const {
    assert(i >= 0 && i < rank());
    return shape_[static_cast<size_t>(i)];
  }

  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::int64_t i) {
    assert(i >= 0 && i < size());
    return data_[static_cast<size_t>(i)];
  }
  const T& operator[](std::int64_t i) const {
    assert(i >= 0 && i < size());
    return data_[static_cast<size_t>(i)];
  }

  T& at(int z, int y, int x) {
    assert(rank() == 3);
    return data_[static_cast<size_t>((static_cast<std::int64_t>(z) * shape_[1] + y) * shape_[2] + x)];
  }
  const T& at(int z, int y, int x) const {
    return const_cast<Tensor*>(this)->at(z, y, x);
  }

  T& at(int c, int d, int h, int w) {
    assert(rank() == 4);
    std::int64_t i = c;
    i = i * shape_[1] + d;
    i = i * shape_[2] + h;
    i = i * shape_[3] + w;
    return data_[static_cast<size_t>(i)];
  }
  const T& at(int c, int d, int h, int w) const {
    return const_cast<Tensor*>(this)->at(c, d, h, w);
  }

  T& at(int b, int c, int d, int h, int w) {
    assert(rank() == 5);
    std::int64_t i = b;
    i = i * shape_[1] + c;
    i = i * shape_[2] + d;
    i = i * shape_[3] + h;
    i = i * shape_[4] + w;
    return data_[static_cast<size_t>(i)];
  }
  const T& at(int b, int c, int d, int h, int w) const {
    return const_cast<Tensor*>(this)->at(b, c, d, h, w);
  }

  template <typename U>
  bool same_shape(const Tensor<U>& o) const { return shape_ == o.shape(); }

  void fill(T v) { data_.assign(data_.size(), v); }

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension");
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

using GridF = Tensor<float>;
using GridU8 = Tensor<std::uint8_t>;

struct Spacing {
  double z = 1.0;
  double y = 1.0;
  double x = 1.0;
};

inline std::string shape_string(const std::vector<int>& shape) {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

}  // namespace oarstd
