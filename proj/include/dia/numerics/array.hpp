#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dia {

/// Error raised for invalid shapes, ranges or arguments.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Accumulator type used for reductions: 64-bit for 32-bit storage.
template <class T>
using Accum = std::conditional_t<(sizeof(T) < sizeof(double)), double, T>;

/// Dense row-major array. Shape product always equals data length.
template <class T>
class BasicArray {
 public:
  using value_type = T;

  BasicArray() = default;

  explicit BasicArray(std::vector<int> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  BasicArray(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size()) {
      throw ShapeError("array: shape product " + std::to_string(count(shape_)) +
                       " != data length " + std::to_string(data_.size()));
    }
  }

  static BasicArray matrix(int rows, int cols, T fill = T(0)) {
    return BasicArray({rows, cols}, fill);
  }

  static BasicArray row(std::initializer_list<T> values) {
    return BasicArray({1, static_cast<int>(values.size())}, std::vector<T>(values));
  }

  static BasicArray scalar(T v) { return BasicArray({1, 1}, std::vector<T>{v}); }

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeError("array: axis out of range");
    return shape_[axis];
  }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Leading dimension; a 1-d array is treated as a single row.
  int rows() const { return shape_.size() <= 1 ? 1 : shape_[0]; }
  /// Product of the trailing dimensions.
  int cols() const {
    if (shape_.empty()) return 0;
    if (shape_.size() == 1) return shape_[0];
    return static_cast<int>(data_.size() / static_cast<std::size_t>(std::max(1, shape_[0])));
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  const T& at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

  T item() const {
    if (data_.size() != 1) throw ShapeError("array: item() on non-scalar");
    return data_[0];
  }

  BasicArray reshaped(std::vector<int> shape) const {
    return BasicArray(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  BasicArray<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicArray<U>(shape_, std::move(out));
  }

  bool operator==(const BasicArray&) const = default;

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ShapeError("array: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

using Array = BasicArray<float>;
using ArrayD = BasicArray<double>;

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace dia
