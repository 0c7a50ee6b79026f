#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "trigact/errors.hpp"

namespace trigact {

/// NCHW extent. Feature vectors are stored as (n, features, 1, 1).
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t per_sample() const { return c * h * w; }
  std::size_t size() const { return n * per_sample(); }
  Shape with_batch(std::size_t batch) const { return {batch, c, h, w}; }
  bool same_sample_shape(const Shape& o) const { return c == o.c && h == o.h && w == o.w; }
  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
  }
};

/// Dense row-major NCHW array with value semantics.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size())
      throw ContractError("tensor data size " + std::to_string(data_.size()) +
                          " does not match shape " + shape_.str());
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }

  std::span<T> sample(std::size_t i) {
    return std::span<T>(data_).subspan(i * shape_.per_sample(), shape_.per_sample());
  }
  std::span<const T> sample(std::size_t i) const {
    return std::span<const T>(data_).subspan(i * shape_.per_sample(), shape_.per_sample());
  }

  /// Reinterpret with a new shape of identical size.
  Tensor reshaped(Shape s) const {
    if (s.size() != size()) throw ContractError("reshape " + shape_.str() + " -> " + s.str());
    return Tensor(s, data_);
  }
  void reshape(Shape s) {
    if (s.size() != size()) throw ContractError("reshape " + shape_.str() + " -> " + s.str());
    shape_ = s;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    check_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }
  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, T s) { return a *= s; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_same(const Tensor& o, const char* op) const {
    if (!(o.shape_ == shape_))
      throw ContractError(std::string("shape mismatch in ") + op + ": " + shape_.str() + " vs " +
                          o.shape_.str());
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Stack `count` rows taken from `src` at `indices`.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& src, std::span<const std::size_t> indices) {
  const std::size_t ps = src.shape().per_sample();
  Tensor<T> out(src.shape().with_batch(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto s = src.sample(indices[i]);
    std::copy(s.begin(), s.end(), out.data() + i * ps);
  }
  return out;
}

/// Concatenate along the batch dimension.
template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.shape().same_sample_shape(b.shape()))
    throw ContractError("concat_batch: " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(a.shape().with_batch(a.shape().n + b.shape().n));
  std::copy(a.values().begin(), a.values().end(), out.data());
  std::copy(b.values().begin(), b.values().end(), out.data() + a.size());
  return out;
}

/// Rows [begin, begin + count).
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.shape().n) throw ContractError("slice_batch out of range");
  const std::size_t ps = a.shape().per_sample();
  return Tensor<T>(a.shape().with_batch(count),
                   std::vector<T>(a.data() + begin * ps, a.data() + (begin + count) * ps));
}

template <typename T>
T linf_norm(std::span<const T> v) {
  T m = 0;
  for (T x : v) m = std::max(m, std::abs(x));
  return m;
}

/// sgn with sgn(0) = 0.
template <typename T>
constexpr T sign(T v) {
  return static_cast<T>((T(0) < v) - (v < T(0)));
}

}  // namespace trigact
