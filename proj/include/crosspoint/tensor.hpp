#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crosspoint/errors.hpp"

namespace crosspoint {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// Dense row-major array of doubles. Scalars have shape [1].
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != data_.size()) {
      throw ShapeError("tensor of shape " + to_string(shape_) + " given " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i) out.data_[i * n + i] = 1.0;
    return out;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t row, std::size_t col) {
    return data_[row * shape_.back() + col];
  }
  double at(std::size_t row, std::size_t col) const {
    return data_[row * shape_.back() + col];
  }

  double item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on tensor of shape " + to_string(shape_));
    }
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  bool operator==(const Tensor&) const = default;

 private:
  static std::size_t checked_size(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (std::size_t e : shape) {
      if (e == 0) {
        throw ShapeError("tensor extents must be positive, got " +
                         to_string(shape));
      }
    }
    return shape_size(shape);
  }

  Shape shape_;
  std::vector<double> data_;
};

}  // namespace crosspoint
