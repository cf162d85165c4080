#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xmd/errors.hpp"

namespace xmd {

using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<const MatrixRM>;
using VectorMap = Eigen::Map<const Eigen::VectorXd>;
using ArrayMap = Eigen::Map<const Eigen::ArrayXd>;

// Immutable dense n-dimensional array of 64-bit floats, row-major.
// Copies are cheap (shared storage); all mutation builds new tensors.
class Tensor {
 public:
  // Rank-0 scalar holding 0.0.
  Tensor() : Tensor({}, std::vector<double>{0.0}) {}

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double v);

  // Validating constructor for external input: rejects NaN/Inf and
  // shape/data length mismatch.
  static Tensor from_data(std::vector<std::size_t> shape,
                          std::vector<double> data);

  // Internal constructor: trusts the caller on finiteness (op outputs are
  // checked where the NaN-abort policy requires it).
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_->size(); }
  std::size_t extent(std::size_t axis) const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  std::span<const double> values() const { return {data_->data(), data_->size()}; }
  const double* data() const { return data_->data(); }
  double at(std::size_t i) const { return (*data_)[i]; }

  // Requires numel()==1.
  double scalar_value() const;

  // Eigen views. matrix() requires rank 2; vector()/array() view the flat
  // row-major buffer.
  MatrixMap matrix() const;
  VectorMap vector() const { return VectorMap(data(), static_cast<Eigen::Index>(numel())); }
  ArrayMap array() const { return ArrayMap(data(), static_cast<Eigen::Index>(numel())); }

  bool all_finite() const;

  // Bitwise equality of shape and payload.
  friend bool operator==(const Tensor& a, const Tensor& b);
  friend bool operator!=(const Tensor& a, const Tensor& b) { return !(a == b); }

  std::string shape_str() const;

 private:
  std::vector<std::size_t> shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);

// Builds a rank-2 tensor from an Eigen expression.
template <typename Derived>
Tensor tensor_from_matrix(const Eigen::MatrixBase<Derived>& m) {
  MatrixRM rm = m;
  std::vector<double> data(rm.data(), rm.data() + rm.size());
  return Tensor({static_cast<std::size_t>(rm.rows()),
                 static_cast<std::size_t>(rm.cols())},
                std::move(data));
}

}  // namespace xmd
