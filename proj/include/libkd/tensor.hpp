// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "libkd/error.hpp"

namespace libkd {

class Rng;
class Tape;

enum class DType : std::uint8_t { f32, f64 };

const char* dtype_name(DType dt);

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// Dense row-major storage. Exactly one of the two vectors is in use.
struct Buffer {
  DType dtype = DType::f32;
  std::vector<float> f32;
  std::vector<double> f64;

  Buffer() = default;
  Buffer(DType dt, std::size_t n);

  std::size_t size() const { return dtype == DType::f32 ? f32.size() : f64.size(); }
  bool empty() const { return size() == 0; }

  template <class T>
  std::span<T> as();
  template <class T>
  std::span<const T> as() const;
};

template <>
inline std::span<float> Buffer::as<float>() {
  return f32;
}
template <>
inline std::span<double> Buffer::as<double>() {
  return f64;
}
template <>
inline std::span<const float> Buffer::as<float>() const {
  return f32;
}
template <>
inline std::span<const double> Buffer::as<double>() const {
  return f64;
}

struct TensorImpl {
  Shape shape;
  Buffer data;
  bool requires_grad = false;
  std::shared_ptr<TensorImpl> grad;
  // Producing node on a tape; only meaningful while tape_epoch matches.
  Tape* tape = nullptr;
  std::uint64_t tape_epoch = 0;
  std::size_t node = static_cast<std::size_t>(-1);
};

/// Calls f(T{}) with T = float or double according to dt.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
  if (dt == DType::f32) return f(float{});
  return f(double{});
}

}  // namespace detail

/// N-dimensional dense tensor with shared ownership of its storage.
/// Copies of a Tensor alias the same data; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dt = DType::f32);
  static Tensor ones(Shape shape, DType dt = DType::f32);
  static Tensor full(Shape shape, double value, DType dt = DType::f32);
  static Tensor from(Shape shape, std::vector<float> values);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor from(Shape shape, std::initializer_list<double> values, DType dt = DType::f32);
  static Tensor scalar(double value, DType dt = DType::f32);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, DType dt = DType::f32);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, DType dt = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const;
  /// Writable view; reserved for initializers and optimizers acting on leaves.
  template <class T>
  std::span<T> mutable_data();

  /// Value of element i converted to double.
  double at(std::size_t i) const;
  void set(std::size_t i, double value);
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  /// Accumulated gradient of a leaf; undefined Tensor if none has been populated.
  Tensor grad() const;
  void zero_grad();

  Tensor clone() const;
  Tensor to(DType dt) const;
  /// Copy of the values detached from any tape.
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Bitwise equality of shape, dtype and every element.
bool bit_equal(const Tensor& a, const Tensor& b);

/// Define-by-run record of differentiable operations. Operations executed
/// while a tape is recording on the current thread and touching at least one
/// tensor that requires grad append a node; backward() replays them in reverse.
class Tape {
 public:
  using BackwardFn =
      std::function<void(const detail::Buffer& grad_out, std::span<detail::Buffer* const> grad_in)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  /// RAII guard making a tape the active recorder for this thread.
  class Recording {
   public:
    explicit Recording(Tape& tape);
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;
    ~Recording();

   private:
    Tape* previous_;
  };

  Recording record() { return Recording(*this); }

  /// Drops all nodes and starts a new epoch; tensors from earlier epochs
  /// become plain constants.
  void clear();

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t epoch() const { return epoch_; }

  static Tape* active();

  /// Appends a node producing `output`. Marks output as requiring grad.
  void push(std::vector<Tensor> inputs, BackwardFn fn, Tensor& output);

  void backward(const Tensor& loss);

 private:
  struct Node {
    std::vector<Tensor> inputs;
    BackwardFn fn;
  };

  bool owns(const detail::TensorImpl& t) const {
    return t.tape == this && t.tape_epoch == epoch_ && t.node < nodes_.size();
  }

  std::vector<Node> nodes_;
  std::uint64_t epoch_;
};

/// Returns the active tape when any of the inputs requires grad, else nullptr.
Tape* recording_tape(std::initializer_list<const Tensor*> inputs);
Tape* recording_tape(std::span<const Tensor> inputs);

/// Runs reverse-mode differentiation from a scalar loss. Every leaf requiring
/// grad that is reachable from the loss accumulates d(loss)/d(leaf).
void backward(const Tensor& loss);

}  // namespace libkd
