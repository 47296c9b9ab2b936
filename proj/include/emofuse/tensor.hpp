// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <type_traits>
#include <vector>

#include "emofuse/common.hpp"
#include "emofuse/rng.hpp"

namespace emofuse {

// Dense n-dimensional array in row-major order, with an optional gradient
// buffer of the same shape. Data and gradient are shared buffers so that
// reshaped views alias the same storage (a reshape then needs no tape entry).
template <class T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor requires a floating-point scalar");

 public:
  Tensor(std::vector<size_t> shape, bool requires_grad)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), T(0))),
        requires_grad_(requires_grad),
        id_(next_id_()) {
    if (requires_grad_) grad_ = std::make_shared<std::vector<T>>(data_->size(), T(0));
  }

  Tensor(std::vector<size_t> shape, std::vector<T> values, bool requires_grad = false)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(std::move(values))),
        requires_grad_(requires_grad),
        id_(next_id_()) {
    if (data_->size() != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                       " does not match shape " + shape_str(shape_));
    if (requires_grad_) grad_ = std::make_shared<std::vector<T>>(data_->size(), T(0));
  }

  static std::shared_ptr<Tensor> make(std::vector<size_t> shape, bool requires_grad = false) {
    return std::make_shared<Tensor>(std::move(shape), requires_grad);
  }

  static std::shared_ptr<Tensor> make(std::vector<size_t> shape, std::vector<T> values,
                                      bool requires_grad = false) {
    return std::make_shared<Tensor>(std::move(shape), std::move(values), requires_grad);
  }

  static std::shared_ptr<Tensor> scalar(T v, bool requires_grad = false) {
    return make({1}, {v}, requires_grad);
  }

  static std::shared_ptr<Tensor> zeros_like(const Tensor& other) {
    return make(other.shape_, other.requires_grad_);
  }

  static std::shared_ptr<Tensor> filled(std::vector<size_t> shape, T v, bool requires_grad = false) {
    auto t = make(std::move(shape), requires_grad);
    for (auto& x : *t->data_) x = v;
    return t;
  }

  static std::shared_ptr<Tensor> randn(std::vector<size_t> shape, RngStream& rng, T stddev = T(1),
                                       bool requires_grad = false) {
    auto t = make(std::move(shape), requires_grad);
    for (auto& x : *t->data_) x = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  static std::shared_ptr<Tensor> rand_uniform(std::vector<size_t> shape, RngStream& rng, T lo, T hi,
                                              bool requires_grad = false) {
    auto t = make(std::move(shape), requires_grad);
    for (auto& x : *t->data_) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t dim(size_t i) const { return shape_.at(i); }
  size_t size() const { return data_->size(); }
  bool requires_grad() const { return requires_grad_; }
  uint64_t id() const { return id_; }

  std::span<T> values() { return {data_->data(), data_->size()}; }
  std::span<const T> values() const { return {data_->data(), data_->size()}; }
  T value_at(size_t i) const { return (*data_)[i]; }

  // Gradient buffer; only valid when requires_grad() is true.
  std::span<T> grad() { return {grad_->data(), grad_->size()}; }
  std::span<const T> grad() const { return {grad_->data(), grad_->size()}; }
  bool has_grad() const { return grad_ != nullptr; }

  void zero_grad() {
    if (grad_)
      for (auto& g : *grad_) g = T(0);
  }

  // View with a different shape over the same data and gradient buffers.
  std::shared_ptr<Tensor> reshaped(std::vector<size_t> new_shape) const {
    if (shape_numel(new_shape) != data_->size())
      throw ShapeError("reshape from " + shape_str(shape_) + " to " + shape_str(new_shape) +
                       " changes element count");
    auto t = std::make_shared<Tensor>(View{}, std::move(new_shape), data_, grad_, requires_grad_);
    return t;
  }

  bool all_finite() const {
    for (const T& x : *data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  // Internal view constructor (public for make_shared).
  struct View {};
  Tensor(View, std::vector<size_t> shape, std::shared_ptr<std::vector<T>> data,
         std::shared_ptr<std::vector<T>> grad, bool requires_grad)
      : shape_(std::move(shape)),
        data_(std::move(data)),
        grad_(std::move(grad)),
        requires_grad_(requires_grad),
        id_(next_id_()) {}

 private:
  static uint64_t next_id_() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }

  std::vector<size_t> shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<std::vector<T>> grad_;
  bool requires_grad_ = false;
  uint64_t id_ = 0;
};

template <class T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <class T>
TensorPtr<T> reshape(const TensorPtr<T>& t, std::vector<size_t> new_shape) {
  return t->reshaped(std::move(new_shape));
}

}  // namespace emofuse
