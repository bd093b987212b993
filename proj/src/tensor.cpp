// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include "libkd/tensor.hpp"

#include <atomic>
#include <cstring>
#include <sstream>

#include "libkd/rng.hpp"

namespace libkd {

const char* dtype_name(DType dt) { return dt == DType::f32 ? "float32" : "float64"; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

Buffer::Buffer(DType dt, std::size_t n) : dtype(dt) {
  if (dt == DType::f32) {
    f32.assign(n, 0.0f);
  } else {
    f64.assign(n, 0.0);
  }
}

}  // namespace detail

namespace {

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, DType dt) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data = detail::Buffer(dt, shape_numel(shape));
  impl->shape = std::move(shape);
  return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, DType dt) { return Tensor(make_impl(std::move(shape), dt)); }

Tensor Tensor::ones(Shape shape, DType dt) { return full(std::move(shape), 1.0, dt); }

Tensor Tensor::full(Shape shape, double value, DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  detail::dispatch(dt, [&]<class T>(T) {
    for (T& v : t.mutable_data<T>()) v = static_cast<T>(value);
  });
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<float> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
  }
  auto impl = make_impl(std::move(shape), DType::f32);
  impl->data.f32 = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
  }
  auto impl = make_impl(std::move(shape), DType::f64);
  impl->data.f64 = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, DType dt) {
  if (dt == DType::f64) return from(std::move(shape), std::vector<double>(values));
  std::vector<float> f;
  f.reserve(values.size());
  for (double v : values) f.push_back(static_cast<float>(v));
  return from(std::move(shape), std::move(f));
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  detail::dispatch(dt, [&]<class T>(T) {
    for (T& v : t.mutable_data<T>()) v = static_cast<T>(rng.normal(0.0, stddev));
  });
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  detail::dispatch(dt, [&]<class T>(T) {
    for (T& v : t.mutable_data<T>()) v = static_cast<T>(rng.uniform(lo, hi));
  });
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

DType Tensor::dtype() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->data.dtype;
}

template <class T>
std::span<const T> Tensor::data() const {
  if (dtype() != (std::is_same_v<T, float> ? DType::f32 : DType::f64)) {
    throw DimensionError(std::string("tensor holds ") + dtype_name(dtype()));
  }
  return std::as_const(impl_->data).as<T>();
}

template <class T>
std::span<T> Tensor::mutable_data() {
  if (dtype() != (std::is_same_v<T, float> ? DType::f32 : DType::f64)) {
    throw DimensionError(std::string("tensor holds ") + dtype_name(dtype()));
  }
  return impl_->data.as<T>();
}

template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;
template std::span<float> Tensor::mutable_data<float>();
template std::span<double> Tensor::mutable_data<double>();

double Tensor::at(std::size_t i) const {
  if (i >= numel()) throw RangeError("element index out of range");
  return dtype() == DType::f32 ? static_cast<double>(impl_->data.f32[i]) : impl_->data.f64[i];
}

void Tensor::set(std::size_t i, double value) {
  if (i >= numel()) throw RangeError("element index out of range");
  if (dtype() == DType::f32) {
    impl_->data.f32[i] = static_cast<float>(value);
  } else {
    impl_->data.f64[i] = value;
  }
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = at(i);
  return out;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_) throw ContractError("use of undefined tensor");
  impl_->requires_grad = on;
  return *this;
}

Tensor Tensor::grad() const {
  if (!impl_ || !impl_->grad) return Tensor();
  return Tensor(impl_->grad);
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.reset();
}

Tensor Tensor::clone() const {
  if (!impl_) return Tensor();
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::to(DType dt) const {
  if (dtype() == dt) return clone();
  Tensor out = zeros(shape(), dt);
  if (dt == DType::f64) {
    auto src = data<float>();
    auto dst = out.mutable_data<double>();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i];
  } else {
    auto src = data<double>();
    auto dst = out.mutable_data<float>();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(src[i]);
  }
  return out;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined()) return a.defined() == b.defined();
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  if (a.dtype() == DType::f32) {
    auto x = a.data<float>();
    auto y = b.data<float>();
    return std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
  }
  auto x = a.data<double>();
  auto y = b.data<double>();
  return std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
}

// ---------------------------------------------------------------------------
// Tape

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_epoch_counter{1};

}  // namespace

Tape::Tape() : epoch_(g_epoch_counter.fetch_add(1)) {}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape::Recording::Recording(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

Tape::Recording::~Recording() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::clear() {
  nodes_.clear();
  epoch_ = g_epoch_counter.fetch_add(1);
}

void Tape::push(std::vector<Tensor> inputs, BackwardFn fn, Tensor& output) {
  detail::TensorImpl* out = output.impl();
  out->requires_grad = true;
  out->tape = this;
  out->tape_epoch = epoch_;
  out->node = nodes_.size();
  nodes_.push_back(Node{std::move(inputs), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  const DType dt = loss.dtype();
  detail::TensorImpl* root = loss.impl();
  if (!owns(*root)) {
    if (!root->requires_grad) {
      throw ContractError("backward() on a loss that is not on the active tape");
    }
    // A leaf loss: d(loss)/d(loss) = 1.
    if (!root->grad) root->grad = Tensor::zeros(root->shape, dt).impl_ptr();
    detail::dispatch(dt, [&]<class T>(T) { root->grad->data.as<T>()[0] += T(1); });
    return;
  }

  std::vector<detail::Buffer> grads(root->node + 1);
  grads[root->node] = detail::Buffer(dt, 1);
  detail::dispatch(dt, [&]<class T>(T) { grads[root->node].as<T>()[0] = T(1); });

  std::vector<detail::Buffer*> slots;
  for (std::size_t n = root->node + 1; n-- > 0;) {
    if (grads[n].empty()) continue;
    Node& node = nodes_[n];
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      detail::TensorImpl* in = node.inputs[i].impl();
      if (owns(*in)) {
        detail::Buffer& g = grads[in->node];
        if (g.empty()) g = detail::Buffer(in->data.dtype, in->data.size());
        slots[i] = &g;
      } else if (in->requires_grad) {
        if (!in->grad) in->grad = Tensor::zeros(in->shape, in->data.dtype).impl_ptr();
        slots[i] = &in->grad->data;
      }
    }
    node.fn(grads[n], slots);
    grads[n] = detail::Buffer();
  }
}

Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = Tape::active();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs) {
    if (t && t->requires_grad()) return tape;
  }
  return nullptr;
}

Tape* recording_tape(std::span<const Tensor> inputs) {
  Tape* tape = Tape::active();
  if (!tape) return nullptr;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) return tape;
  }
  return nullptr;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward() on undefined tensor");
  Tape* tape = Tape::active();
  if (tape == nullptr) throw ContractError("backward() requires an active tape");
  tape->backward(loss);
}

}  // namespace libkd
