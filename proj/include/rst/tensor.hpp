#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rst {

#ifdef RST_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when operands do not conform to a primitive's shape rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major n-dimensional array. Extents are strictly positive.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor scalar(Real value);

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] std::span<Real> data() noexcept { return data_; }
  [[nodiscard]] std::span<const Real> data() const noexcept { return data_; }
  [[nodiscard]] std::vector<Real>& values() noexcept { return data_; }
  [[nodiscard]] const std::vector<Real>& values() const noexcept { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  /// Value of a single-element tensor.
  [[nodiscard]] Real item() const;

  [[nodiscard]] Tensor reshaped(Shape shape) const;

  /// Rows [begin, end) along axis 0.
  [[nodiscard]] Tensor slice_rows(std::size_t begin, std::size_t end) const;

  void fill(Real value);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<Real> data_;
};

/// Gathers rows of `source` (axis 0) in the given order.
Tensor gather_rows(const Tensor& source, std::span<const std::size_t> rows);

}  // namespace rst
