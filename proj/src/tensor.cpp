#include "pncnn/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "pncnn/error.hpp"

namespace pncnn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

DiffTensor::DiffTensor(Shape shape, double fill, bool requires_grad)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill), requires_grad_(requires_grad) {}

DiffTensor::DiffTensor(Shape shape, std::vector<double> data, bool requires_grad)
    : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
  }
}

std::span<double> DiffTensor::grad() {
  if (!grad_) grad_.emplace(data_.size(), 0.0);
  return *grad_;
}

std::span<const double> DiffTensor::grad() const {
  if (!grad_) throw Error("gradient requested for tensor without gradient buffer");
  return *grad_;
}

void DiffTensor::zero_grad() {
  if (grad_) {
    std::fill(grad_->begin(), grad_->end(), 0.0);
  } else {
    grad_.emplace(data_.size(), 0.0);
  }
}

TensorPtr make_tensor(Shape shape, double fill, bool requires_grad) {
  return std::make_shared<DiffTensor>(std::move(shape), fill, requires_grad);
}

TensorPtr make_tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  return std::make_shared<DiffTensor>(std::move(shape), std::move(data), requires_grad);
}

void require_same_shape(const DiffTensor& a, const DiffTensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace pncnn
