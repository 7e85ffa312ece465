#pragma once

#include <algorithm>
#include <initializer_list>
#include <memory>
#include <span>

#include "xdial/common.hpp"

namespace xdial {

template <typename T>
class Tape;

/// Dense row-major tensor. A Tensor is a cheap handle: copies share the
/// underlying storage. Gradients live in a separate same-shape buffer that is
/// allocated when requires_grad is set and filled in by Tape::backward.
template <typename T>
class Tensor {
 public:
  using Buffer = std::vector<T>;

  Tensor() : shape_{0}, data_(std::make_shared<Buffer>()) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)),
        data_(std::make_shared<Buffer>(checked_numel(shape_), fill)) {}

  Tensor(Shape shape, Buffer values) : shape_(std::move(shape)) {
    if (checked_numel(shape_) != static_cast<std::int64_t>(values.size()))
      throw DimError("Tensor: shape " + shape_str(shape_) + " does not match " +
                     std::to_string(values.size()) + " values");
    data_ = std::make_shared<Buffer>(std::move(values));
  }

  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), Buffer(values)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, {v}); }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& x : *t.data_) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(Shape shape, Rng& rng, double mean, double stddev) {
    Tensor t(std::move(shape));
    for (auto& x : *t.data_) x = static_cast<T>(rng.normal(mean, stddev));
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const {
    if (i < 0) i += rank();
    return shape_[static_cast<std::size_t>(i)];
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_->size()); }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }

  /// Mutable access to the values. Must not be used on a tensor that already
  /// participates in a live tape: recorded forward values would go stale.
  std::span<T> mutable_data() { return {data_->data(), data_->size()}; }

  /// Value of a scalar (1-element) tensor.
  T item() const {
    if (numel() != 1)
      throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements");
    return (*data_)[0];
  }

  T at(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank())
      throw IndexError("at(): rank mismatch");
    std::int64_t off = 0;
    int i = 0;
    for (auto v : idx) {
      off = off * shape_[static_cast<std::size_t>(i)] + v;
      ++i;
    }
    return (*data_)[static_cast<std::size_t>(off)];
  }

  bool requires_grad() const { return requires_grad_; }

  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on && !grad_) grad_ = std::make_shared<Buffer>(data_->size(), T(0));
    return *this;
  }

  bool has_grad() const { return grad_ != nullptr; }

  std::span<const T> grad() const {
    if (!grad_) throw ContractError("grad(): tensor has no gradient buffer");
    return {grad_->data(), grad_->size()};
  }

  std::span<T> mutable_grad() {
    if (!grad_) throw ContractError("mutable_grad(): tensor has no gradient buffer");
    return {grad_->data(), grad_->size()};
  }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
  }

  /// Deep copy of values (grad buffer not copied).
  Tensor clone() const { return Tensor(shape_, *data_); }

  bool all_finite() const {
    for (T v : *data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  static std::int64_t checked_numel(const Shape& s) {
    for (auto d : s)
      if (d < 0) throw DimError("Tensor: negative dimension in " + shape_str(s));
    return shape_numel(s);
  }

  Shape shape_;
  std::shared_ptr<Buffer> data_;
  std::shared_ptr<Buffer> grad_;
  bool requires_grad_ = false;

  // Tape linkage: id of the node that produced this tensor, valid only while
  // the tape generation matches.
  std::int32_t node_ = -1;
  std::uint64_t tape_gen_ = 0;

  friend class Tape<T>;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace xdial
