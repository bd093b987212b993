// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "libkd/tensor.hpp"

namespace libkd::opdetail {

inline void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined input tensor");
}

inline void require_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw DimensionError(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                         dtype_name(b.dtype()));
  }
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  require_dtype(a, b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require_defined(t, op);
  if (t.dim() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

inline void record(Tape* tape, std::vector<Tensor> inputs, Tape::BackwardFn fn, Tensor& out) {
  if (tape) tape->push(std::move(inputs), std::move(fn), out);
}

template <class T>
std::span<T> grad_of(std::span<detail::Buffer* const> g, std::size_t i) {
  return g[i] ? g[i]->as<T>() : std::span<T>();
}

}  // namespace libkd::opdetail
