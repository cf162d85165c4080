#include "xmd/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace xmd {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)),
      data_(std::make_shared<const std::vector<double>>(std::move(data))) {
  if (data_->size() != shape_numel(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_->size()) +
                         " does not match shape " + shape_str());
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape,
                         std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data));
  if (!t.all_finite()) {
    throw NumericError("tensor input contains non-finite values");
  }
  return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank()));
  }
  return shape_[axis];
}

double Tensor::scalar_value() const {
  if (numel() != 1) {
    throw ContractError("expected scalar tensor, got shape " + shape_str());
  }
  return (*data_)[0];
}

MatrixMap Tensor::matrix() const {
  if (rank() != 2) {
    throw DimensionError("matrix view requires rank 2, got shape " + shape_str());
  }
  return MatrixMap(data(), static_cast<Eigen::Index>(shape_[0]),
                   static_cast<Eigen::Index>(shape_[1]));
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.shape_ != b.shape_) return false;
  if (a.data_ == b.data_) return true;
  return std::memcmp(a.data(), b.data(), a.numel() * sizeof(double)) == 0;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << 'x';
    os << shape_[i];
  }
  os << ']';
  return os.str();
}

}  // namespace xmd
