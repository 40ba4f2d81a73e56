// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace sponge {

/// Dense 2-D tensor. Row-major so that `data()` is laid out like the
/// flat payload used by checkpoints.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using TokenId = int;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename Derived>
std::string shape_string(const Eigen::DenseBase<Derived> &m) {
  return shape_string(m.rows(), m.cols());
}

[[noreturn]] inline void throw_shape_mismatch(std::string_view op, Eigen::Index r0,
                                              Eigen::Index c0, Eigen::Index r1,
                                              Eigen::Index c1) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(r0, c0) +
                   " vs " + shape_string(r1, c1));
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived> &m) {
  return m.allFinite();
}

}  // namespace sponge
