#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace spongelab {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Immutable dense row-major tensor of doubles.
///
/// Storage is shared between copies, so passing a Tensor by value is cheap and
/// safe across threads. Every constructor checks that the payload length
/// matches the shape.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_->size(); }

  std::span<const double> data() const { return {data_->data(), data_->size()}; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t row, std::size_t col) const;
  double item() const;

  std::vector<double> to_vector() const { return *data_; }
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;
  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

}  // namespace spongelab
