#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "eegm2/error.hpp"
#include "eegm2/memory.hpp"

namespace eegm2 {

using Shape = std::vector<int64_t>;

enum class DType { real32, real64 };

template <class S>
constexpr DType dtype_of() {
  if constexpr (sizeof(S) == 4) {
    return DType::real32;
  } else {
    return DType::real64;
  }
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

namespace detail {

// Metered backing buffer. Registers bytes with the Meter before touching the
// heap so an over-cap request fails without physical allocation.
template <class S>
class Storage {
 public:
  explicit Storage(std::size_t n) : bytes_(n * sizeof(S)) {
    memory::Meter::instance().add(bytes_);
    try {
      data_.resize(n);
    } catch (...) {
      memory::Meter::instance().sub(bytes_);
      throw;
    }
  }
  ~Storage() { memory::Meter::instance().sub(bytes_); }
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::size_t size() const { return data_.size(); }

 private:
  std::size_t bytes_;
  std::vector<S> data_;
};

}  // namespace detail

// Dense row-major real tensor with shared storage. Copies are shallow;
// mutation through data() is visible to all copies. Ops always allocate
// fresh storage for their outputs, except reshape which aliases.
template <class S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        store_(std::make_shared<detail::Storage<S>>(
            static_cast<std::size_t>(shape_numel(shape_)))) {
    for (int64_t d : shape_) {
      if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = v;
    return t;
  }

  static Tensor from(const std::vector<S>& values, Shape shape) {
    Tensor t(std::move(shape));
    if (static_cast<int64_t>(values.size()) != t.numel()) {
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(t.shape()));
    }
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  static Tensor scalar(S v) { return full({1}, v); }

  bool defined() const { return store_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t size(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  int64_t numel() const { return store_ ? static_cast<int64_t>(store_->size()) : 0; }

  S* data() { return store_->data(); }
  const S* data() const { return store_->data(); }

  S& at(int64_t i) { return store_->data()[i]; }
  S at(int64_t i) const { return store_->data()[i]; }

  /// Deep copy with fresh storage.
  Tensor clone() const {
    Tensor t(shape_);
    std::copy(data(), data() + numel(), t.data());
    return t;
  }

  /// Aliases the same storage under a new shape with equal element count.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                       " changes element count");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.store_ = store_;
    return t;
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> t{shape_};
    for (int64_t i = 0; i < numel(); ++i) t.data()[i] = static_cast<T>(data()[i]);
    return t;
  }

  bool all_finite() const {
    for (int64_t i = 0; i < numel(); ++i) {
      if (!std::isfinite(static_cast<double>(data()[i]))) return false;
    }
    return true;
  }

 private:
  Shape shape_;
  std::shared_ptr<detail::Storage<S>> store_;

  template <class T>
  friend class Tensor;
};

template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

}  // namespace eegm2
