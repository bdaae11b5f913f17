#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace condvc {

// Raised whenever two operands disagree on shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NCHW shape. Every tensor in the library is 4-D; scalars are 1x1x1x1.
struct Shape {
  int n{1};
  int c{1};
  int h{1};
  int w{1};

  constexpr std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  constexpr std::size_t plane() const { return static_cast<std::size_t>(h) * w; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << '[' << n << ',' << c << ',' << h << ',' << w << ']';
    return os.str();
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape_(s), data_(s.numel(), fill) {}
  Tensor(Shape s, std::vector<T> data) : shape_(s), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  T item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_.str());
    }
    return data_[0];
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

// Bitwise equality, used by determinism checks. Distinguishes -0.0 from 0.0.
template <typename T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) return false;
  return std::equal(a.vec().begin(), a.vec().end(), b.vec().begin(), [](T x, T y) {
    return std::memcmp(&x, &y, sizeof(T)) == 0;
  });
}

}  // namespace condvc
