#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pncnn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
class DiffTensor {
 public:
  DiffTensor() = default;
  explicit DiffTensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  DiffTensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Element access for rank-3 [C, H, W] tensors.
  double& at(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  double at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool flag) { requires_grad_ = flag; }

  bool has_grad() const { return grad_.has_value(); }
  /// Gradient buffer; allocated (zero-filled) on first access.
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();
  void drop_grad() { grad_.reset(); }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
  bool requires_grad_ = false;
};

using TensorPtr = std::shared_ptr<DiffTensor>;

TensorPtr make_tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
TensorPtr make_tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

/// Throws ShapeError naming both shapes when they differ.
void require_same_shape(const DiffTensor& a, const DiffTensor& b, const char* op);

}  // namespace pncnn
