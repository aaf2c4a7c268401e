#include "moesim/tensor.hpp"

#include <cmath>

namespace moesim {

Index shape_size(const std::vector<Index>& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e < 1) throw std::invalid_argument("Tensor: extents must be positive");
    n *= e;
  }
  return n;
}

Tensor::Tensor(std::vector<Index> s, Eigen::VectorXd d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_size(shape) != data.size()) throw std::invalid_argument("Tensor: shape/data mismatch");
}

Tensor Tensor::zeros(std::vector<Index> shape) {
  Index n = shape_size(shape);
  return Tensor(std::move(shape), Eigen::VectorXd::Zero(n));
}

Tensor Tensor::random(std::vector<Index> shape, Rng& rng, double lo, double hi) {
  Index n = shape_size(shape);
  Eigen::VectorXd d(n);
  for (Index i = 0; i < n; ++i) d[i] = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(d));
}

MatMap Tensor::as_matrix() {
  if (rank() != 2) throw std::invalid_argument("Tensor: as_matrix needs rank 2");
  return matrix(extent(0), extent(1));
}

ConstMatMap Tensor::as_matrix() const {
  if (rank() != 2) throw std::invalid_argument("Tensor: as_matrix needs rank 2");
  return matrix(extent(0), extent(1));
}

Tensor Tensor::reshaped(std::vector<Index> new_shape) const {
  if (shape_size(new_shape) != size()) throw std::invalid_argument("Tensor: reshape size mismatch");
  return Tensor(std::move(new_shape), data);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw std::invalid_argument("max_abs_diff: size mismatch");
  return (a.data - b.data).cwiseAbs().maxCoeff();
}

double max_rel_diff(const Tensor& a, const Tensor& b) {
  double scale = std::max({a.data.cwiseAbs().maxCoeff(), b.data.cwiseAbs().maxCoeff(), 1e-300});
  return max_abs_diff(a, b) / scale;
}

}  // namespace moesim
