#pragma once

#include <Eigen/Dense>
#include <initializer_list>
#include <vector>

#include "moesim/core.hpp"

namespace moesim {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixRM>;
using ConstMatMap = Eigen::Map<const MatrixRM>;

// Dense row-major buffer with an explicit shape. The universal payload of
// encode/decode, experts, and collectives.
struct Tensor {
  std::vector<Index> shape;
  Eigen::VectorXd data;

  Tensor() = default;
  Tensor(std::vector<Index> s, Eigen::VectorXd d);

  static Tensor zeros(std::vector<Index> shape);
  static Tensor random(std::vector<Index> shape, Rng& rng, double lo = -1.0, double hi = 1.0);

  Index size() const { return data.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }
  Index extent(Index axis) const { return shape[static_cast<std::size_t>(axis)]; }

  double& at(Index i) { return data[i]; }
  const double& at(Index i) const { return data[i]; }
  double& at(Index i, Index j) { return data[i * extent(1) + j]; }
  const double& at(Index i, Index j) const { return data[i * extent(1) + j]; }
  double& at(Index i, Index j, Index k) { return data[(i * extent(1) + j) * extent(2) + k]; }
  const double& at(Index i, Index j, Index k) const {
    return data[(i * extent(1) + j) * extent(2) + k];
  }

  // 2-d views over the flat buffer (row-major).
  MatMap matrix(Index rows, Index cols) { return MatMap(data.data(), rows, cols); }
  ConstMatMap matrix(Index rows, Index cols) const { return ConstMatMap(data.data(), rows, cols); }
  MatMap as_matrix();
  ConstMatMap as_matrix() const;

  Tensor reshaped(std::vector<Index> new_shape) const;
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

Index shape_size(const std::vector<Index>& shape);

double max_abs_diff(const Tensor& a, const Tensor& b);
double max_rel_diff(const Tensor& a, const Tensor& b);

}  // namespace moesim
